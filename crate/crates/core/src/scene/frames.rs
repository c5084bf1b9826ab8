//! Per-frame ground truth in the ego frame.

use crate::error::Result;
use crate::scene::families::EXPERT_DT;
use crate::scene::world::{wrap_angle, Command, Pose, Scenario};
use crate::trajectory::{Path, Point2, Trajectory};

/// Perception range in the ego frame: `x ∈ [-X_BACK, X_FRONT]`,
/// `|y| <= Y_SIDE`.
pub const X_BACK: f64 = 10.0;
pub const X_FRONT: f64 = 40.0;
pub const Y_SIDE: f64 = 20.0;
pub const MAP_CHUNK_M: f64 = 15.0;
pub const MOTION_STEPS: usize = 6;
pub const MOTION_DT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct AgentTruth {
    /// `[x, y, length, width, heading]`.
    pub bbox: [f64; 5],
    /// Displacements from the current center every 0.5 s.
    pub future: Vec<Point2>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTruth {
    pub t: f64,
    pub pose: Pose,
    pub speed: f64,
    pub yaw_rate: f64,
    /// Expert future in the ego frame, starting at the origin at time 0.
    pub future: Trajectory,
    pub agents: Vec<AgentTruth>,
    pub map: Vec<Vec<Point2>>,
    pub target: Point2,
    pub command: Command,
}

pub fn in_range(p: Point2) -> bool {
    p[0] >= -X_BACK && p[0] <= X_FRONT && p[1].abs() <= Y_SIDE
}

/// Evenly spaced points along `pts` by arc length.
pub fn resample_even(pts: &[Point2], n: usize) -> Option<Vec<Point2>> {
    let path = Path::from_points(pts).ok()?;
    let len = path.length();
    Some(
        (0..n)
            .map(|k| path.at(len * k as f64 / (n.max(2) - 1) as f64))
            .collect(),
    )
}

/// Map polylines clipped to the perception range and cut into chunks of at
/// most `MAP_CHUNK_M`, each resampled to `points` vertices.
pub fn map_chunks(scn: &Scenario, pose: &Pose, points: usize) -> Vec<Vec<Point2>> {
    let mut chunks = Vec::new();
    for line in &scn.map {
        let local: Vec<Point2> = line.points.iter().map(|&p| pose.to_local(p)).collect();
        let Ok(path) = Path::from_points(&local) else { continue };
        let n = (path.length() / 0.5).ceil() as usize;
        let mut run: Vec<Point2> = Vec::new();
        let mut run_len = 0.0;
        let mut flush = |run: &mut Vec<Point2>, run_len: &mut f64| {
            if *run_len >= 3.0 {
                if let Some(c) = resample_even(run, points) {
                    chunks.push(c);
                }
            }
            run.clear();
            *run_len = 0.0;
        };
        for k in 0..=n {
            let p = path.at(path.length() * k as f64 / n as f64);
            if in_range(p) {
                if let Some(&q) = run.last() {
                    run_len += crate::trajectory::dist(p, q);
                }
                run.push(p);
                if run_len >= MAP_CHUNK_M {
                    let last = p;
                    flush(&mut run, &mut run_len);
                    run.push(last);
                }
            } else {
                flush(&mut run, &mut run_len);
            }
        }
        flush(&mut run, &mut run_len);
    }
    chunks
}

/// Ground truth at expert sample `k`.
pub fn frame_truth(scn: &Scenario, k: usize, map_points: usize) -> Result<FrameTruth> {
    let ts = scn.expert.timestamps();
    let t = ts[k];
    let pose = scn.expert_pose(k);
    let pts: Vec<Point2> = scn.expert.points()[k..].iter().map(|&p| pose.to_local(p)).collect();
    let stamps: Vec<f64> = ts[k..].iter().map(|&x| x - t).collect();
    let future = Trajectory::new(pts, stamps)?;

    let n = scn.expert.len();
    let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
    let yaw_rate = if b > a {
        wrap_angle(scn.expert_heading[b] - scn.expert_heading[a]) / ((b - a) as f64 * EXPERT_DT)
    } else {
        0.0
    };

    let mut agents = Vec::new();
    for ag in &scn.agents {
        let st = ag.state_at(t)?.in_frame(&pose);
        if !in_range(st.center) {
            continue;
        }
        let mut fut = Vec::with_capacity(MOTION_STEPS);
        for j in 1..=MOTION_STEPS {
            let p = pose.to_local(ag.state_at(t + j as f64 * MOTION_DT)?.center);
            fut.push([p[0] - st.center[0], p[1] - st.center[1]]);
        }
        agents.push(AgentTruth {
            bbox: [st.center[0], st.center[1], st.length, st.width, st.heading],
            future: fut,
        });
    }

    let path = scn.expert_path()?;
    let (s, _) = path.project(scn.expert.points()[k]);
    let rp = scn.route_target(&path, s);
    Ok(FrameTruth {
        t,
        pose,
        speed: scn.expert_speed[k],
        yaw_rate,
        future,
        agents,
        map: map_chunks(scn, &pose, map_points),
        target: pose.to_local(rp.position),
        command: rp.command,
    })
}

/// Expert sample indices used as training frames: every `stride_s`
/// seconds (from `stride_s` on, so a previous frame exists for memory)
/// until the goal is reached, at most `max_frames`.
pub fn frame_indices(scn: &Scenario, stride_s: f64, max_frames: usize) -> Result<Vec<usize>> {
    let path = scn.expert_path()?;
    let step = ((stride_s / EXPERT_DT).round() as usize).max(1);
    let mut out = Vec::new();
    let mut k = step;
    while k < scn.expert.len() && out.len() < max_frames {
        let (s, _) = path.project(scn.expert.points()[k]);
        if s >= scn.goal_s {
            break;
        }
        out.push(k);
        k += step;
    }
    Ok(out)
}

//! Kinematic closed loop at 10 Hz, episode outcomes and metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::control::{control, select, CommandRecord, ControlCommand, Pid, SelectedPlan, SourceTag};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::planning_head::{GranularityLayout, PlanningOutput};
use crate::scene::{boxes_overlap, ego_box, Pose, Scenario};
use crate::training::data::observe;
use crate::trajectory::{build_gt, dist, GranularitySpec, Trajectory, WaypointSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl BicycleState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }
}

/// Explicit Euler step of the kinematic bicycle; speed never goes negative.
pub fn bicycle_step(s: &BicycleState, c: &ControlCommand, dt: f64, wheelbase: f64) -> BicycleState {
    BicycleState {
        x: s.x + s.speed * s.heading.cos() * dt,
        y: s.y + s.speed * s.heading.sin() * dt,
        heading: s.heading + s.speed / wheelbase * c.steering.tan() * dt,
        speed: (s.speed + c.acceleration * dt).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Collision,
    Timeout,
    OffRoute,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Collision => "collision",
            Status::Timeout => "timeout",
            Status::OffRoute => "off_route",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub state: BicycleState,
    pub command: ControlCommand,
    pub source: SourceTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario: String,
    pub status: Status,
    /// Fraction of the route driven, in `[0, 1]`.
    pub completion: f64,
    pub collisions: usize,
    pub duration_s: f64,
    pub trace: Vec<TraceRow>,
    pub commands: Vec<CommandRecord>,
}

impl EpisodeResult {
    /// Route completion times 0.5 per collision.
    pub fn driving_score(&self) -> f64 {
        self.completion * 0.5f64.powi(self.collisions as i32)
    }
}

/// Who drives the ego.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// The network, invoked every step with the round-robin memory.
    Model { model: &'a Model, style_on: bool },
    /// Tracks the expert's future from the current time.
    Expert,
    /// A planner whose every waypoint sits at the ego origin.
    Zero,
}

/// Sets the expert oracle steers and tracks speed with.
fn oracle_specs() -> [GranularitySpec; 2] {
    [GranularitySpec::spatial(2.0, 10), GranularitySpec::temporal(5.0, 15)]
}

fn expert_plan(scn: &Scenario, pose: &Pose, t: f64) -> Result<SelectedPlan> {
    let k = scn.expert_index(t);
    let ts = scn.expert.timestamps();
    let pts = scn.expert.points()[k..].iter().map(|&p| pose.to_local(p)).collect();
    let stamps = ts[k..].iter().map(|&x| x - t).collect();
    let future = Trajectory::new(pts, stamps)?;
    let gt = build_gt(&future, &oracle_specs())?;
    Ok(SelectedPlan {
        modality: 0,
        lateral: gt.sets[0].clone(),
        longitudinal: gt.sets[1].clone(),
        bin: None,
        source: SourceTag::TemporalFallback,
    })
}

fn zero_output(layout: &GranularityLayout) -> PlanningOutput {
    PlanningOutput {
        specs: layout.specs.clone(),
        waypoints: vec![layout.specs.iter().map(|s| vec![[0.0, 0.0]; s.horizon]).collect(); layout.modalities],
        modality_scores: vec![0.0; layout.modalities],
        style_scores: None,
    }
}

/// Drives one scenario until success, collision, leaving the route or the
/// time budget runs out.
pub fn run_episode(scn: &Scenario, policy: Policy<'_>, config: &RunConfig) -> Result<EpisodeResult> {
    let sim = &config.sim;
    if !(sim.dt > 0.0) {
        return Err(Error::Config(format!("sim.dt must be positive, got {}", sim.dt)));
    }
    let path = scn.expert_path()?;
    let bins = config.granularity.speed_bins()?;
    let layout = match policy {
        Policy::Model { model, .. } => model.layout.clone(),
        _ => GranularityLayout::from_config(&config.granularity, config.model.modalities)?,
    };
    let mut bank = match policy {
        Policy::Model { model, .. } => Some(model.memory_bank()?),
        _ => None,
    };
    let mut state = BicycleState {
        x: scn.ego.pose.x,
        y: scn.ego.pose.y,
        heading: scn.ego.pose.heading,
        speed: scn.ego.speed,
    };
    let steps = (sim.time_budget_s / sim.dt).round() as usize;
    let mut pid = Pid::default();
    let mut trace = Vec::with_capacity(steps);
    let mut commands = Vec::with_capacity(steps);
    let mut best_s: f64 = 0.0;
    let mut status = Status::Timeout;
    let mut collisions = 0;
    let mut t = 0.0;
    for step in 0..steps {
        t = step as f64 * sim.dt;
        let pose = state.pose();
        let plan = match policy {
            Policy::Model { model, style_on } => {
                let input = observe(scn, &path, &pose, state.speed, t, config)?;
                let bank = bank.as_mut().expect("model policy has a memory bank");
                let out = model.infer(&input, bank, style_on)?.output;
                select(&out, &layout, &bins)?
            }
            Policy::Expert => expert_plan(scn, &pose, t)?,
            Policy::Zero => select(&zero_output(&layout), &layout, &bins)?,
        };
        let cmd = control(state.speed, &plan, &mut pid, sim.dt, &config.control);
        trace.push(TraceRow {
            t,
            state,
            command: cmd,
            source: plan.source,
        });
        commands.push(CommandRecord {
            t,
            command: cmd,
            source: plan.source,
            modality: plan.modality,
            bin: plan.bin,
        });
        state = bicycle_step(&state, &cmd, sim.dt, config.control.wheelbase);
        t = (step + 1) as f64 * sim.dt;
        let ego = ego_box(&state.pose(), state.speed).inflated(sim.collision_margin_m);
        let hit = scn.agent_boxes(t)?.iter().any(|(_, b)| boxes_overlap(&ego, b))
            || scn.obstacles.iter().any(|o| boxes_overlap(&ego, &o.as_box()));
        let (s, off) = path.project([state.x, state.y]);
        best_s = best_s.max(s);
        if hit {
            collisions += 1;
            status = Status::Collision;
            break;
        }
        if s >= scn.goal_s - sim.goal_tolerance_m {
            status = Status::Success;
            break;
        }
        if off > sim.off_route_m {
            status = Status::OffRoute;
            break;
        }
    }
    let completion = if status == Status::Success {
        1.0
    } else {
        (best_s / scn.goal_s).clamp(0.0, 1.0)
    };
    Ok(EpisodeResult {
        scenario: scn.id.clone(),
        status,
        completion,
        collisions,
        duration_s: t,
        trace,
        commands,
    })
}

/// Runs every scenario, spreading episodes over the available cores. Each
/// episode owns its memory bank.
pub fn run_batch(scenarios: &[Scenario], policy: Policy<'_>, config: &RunConfig) -> Result<Vec<EpisodeResult>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(scenarios.len().max(1));
    if threads <= 1 {
        return scenarios.iter().map(|s| run_episode(s, policy, config)).collect();
    }
    let chunk = scenarios.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| run_episode(s, policy, config)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(scenarios.len());
        for h in handles {
            out.extend(h.join().expect("episode thread panicked")?);
        }
        Ok(out)
    })
}

/// Mean distance over the first four waypoints (0.5 s to 2 s at 2 Hz),
/// ground-truth padded entries excluded. `None` without four waypoints or
/// when all four are padded.
pub fn open_loop_l2(pred: &WaypointSet, gt: &WaypointSet) -> Option<f64> {
    if pred.len() < 4 || gt.len() < 4 {
        return None;
    }
    let mut s = 0.0;
    let mut n = 0;
    for k in 0..4 {
        if !gt.padded[k] {
            s += dist(pred.waypoints[k], gt.waypoints[k]);
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    /// Fractions of episodes in `[0, 1]`.
    pub success_rate: f64,
    pub timeout_rate: f64,
    pub collision_rate: f64,
    pub off_route_rate: f64,
    /// Mean of completion × 0.5^collisions.
    pub driving_score: f64,
}

pub fn aggregate_metrics(results: &[EpisodeResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::Data("no episodes to aggregate".into()));
    }
    let n = results.len() as f64;
    let rate = |st: Status| results.iter().filter(|r| r.status == st).count() as f64 / n;
    Ok(Summary {
        episodes: results.len(),
        success_rate: rate(Status::Success),
        timeout_rate: rate(Status::Timeout),
        collision_rate: rate(Status::Collision),
        off_route_rate: rate(Status::OffRoute),
        driving_score: results.iter().map(|r| r.driving_score()).sum::<f64>() / n,
    })
}

pub const TRACE_CSV_HEADER: &str = "t,x,y,heading,speed,steering,acceleration,source";

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "{TRACE_CSV_HEADER}")?;
    for r in trace {
        let s = &r.state;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.t, s.x, s.y, s.heading, s.speed, r.command.steering, r.command.acceleration, r.source
        )?;
    }
    Ok(())
}

pub const EPISODE_CSV_HEADER: &str = "scenario,status,completion,collisions,duration_s,driving_score";

pub fn write_episode_csv<W: Write>(mut w: W, results: &[EpisodeResult]) -> Result<()> {
    writeln!(w, "{EPISODE_CSV_HEADER}")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.scenario,
            r.status.as_str(),
            r.completion,
            r.collisions,
            r.duration_s,
            r.driving_score()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;

//! Toy multi-camera feature renderer standing in for an image backbone.
//!
//! Every pixel of the finest level is ray cast against the ground plane and
//! the scene boxes. Four base channels (agent occupancy, obstacle
//! occupancy, map proximity, inverse depth) are blurred with a 3×3 box
//! filter; further channels are fixed nonlinear mixtures of the base ones.
//! Coarser levels are 2×2 average pools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scene::camera::CameraModel;
use crate::scene::world::{BoxState, Pose, Scenario};
use crate::trajectory::Point2;

pub const BASE_CHANNELS: usize = 4;
pub const CH_AGENT: usize = 0;
pub const CH_OBSTACLE: usize = 1;
pub const CH_MAP: usize = 2;
pub const CH_DEPTH: usize = 3;
const MAP_RANGE_M: f64 = 80.0;
const MIX_SEED: u64 = 0x00fe_a7e5;

/// Per camera, per level `[H_l, W_l, C]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub maps: Vec<Vec<Tensor>>,
}

impl FeatureGrid {
    pub fn map(&self, cam: usize, level: usize) -> &Tensor {
        &self.maps[cam][level]
    }

    pub fn num_cameras(&self) -> usize {
        self.maps.len()
    }

    pub fn num_levels(&self) -> usize {
        self.maps.first().map_or(0, |m| m.len())
    }

    pub fn channels(&self) -> usize {
        self.maps[0][0].shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxClass {
    Agent,
    Obstacle,
}

/// Scene content in the ego frame.
#[derive(Clone, Debug, Default)]
pub struct EgoView {
    pub boxes: Vec<(BoxClass, BoxState)>,
    pub polylines: Vec<Vec<Point2>>,
}

impl EgoView {
    pub fn of(scn: &Scenario, pose: &Pose, t: f64) -> Result<Self> {
        let mut boxes = Vec::new();
        for (_, b) in scn.agent_boxes(t)? {
            boxes.push((BoxClass::Agent, b.in_frame(pose)));
        }
        for o in &scn.obstacles {
            boxes.push((BoxClass::Obstacle, o.as_box().in_frame(pose)));
        }
        let polylines = scn
            .map
            .iter()
            .map(|m| m.points.iter().map(|&p| pose.to_local(p)).collect())
            .collect();
        Ok(Self { boxes, polylines })
    }
}

/// Ray parameter (camera depth) of the nearest hit with a box, if any.
fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxState) -> Option<f64> {
    let (s, c) = b.heading.sin_cos();
    let rx = o[0] - b.center[0];
    let ry = o[1] - b.center[1];
    let lo = [c * rx + s * ry, -s * rx + c * ry, o[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let half = [b.length / 2.0, b.width / 2.0];
    let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, b.height)];
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let (mn, mx) = bounds[k];
        if ld[k].abs() < 1e-12 {
            if lo[k] < mn || lo[k] > mx {
                return None;
            }
            continue;
        }
        let a = (mn - lo[k]) / ld[k];
        let bb = (mx - lo[k]) / ld[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn point_segment_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn polyline_dist(p: Point2, lines: &[Vec<Point2>]) -> f64 {
    let mut best = f64::INFINITY;
    for l in lines {
        if l.len() == 1 {
            best = best.min(point_segment_dist(p, l[0], l[0]));
        }
        for w in l.windows(2) {
            best = best.min(point_segment_dist(p, w[0], w[1]));
        }
    }
    best
}

/// Unblurred base channels `[H, W, 4]` of one camera.
fn cast_base(view: &EgoView, cam: &CameraModel) -> Vec<f64> {
    let (h, w) = (cam.height, cam.width);
    let o = cam.center();
    let mut out = vec![0.0; h * w * BASE_CHANNELS];
    for row in 0..h {
        for col in 0..w {
            let d = cam.ray(col as f64, row as f64);
            let mut hit: Option<(f64, Option<BoxClass>)> = None;
            if d[2] < -1e-9 {
                hit = Some((-o[2] / d[2], None));
            }
            for (class, b) in &view.boxes {
                if let Some(tb) = ray_box(o, d, b) {
                    if hit.map_or(true, |(th, _)| tb < th) {
                        hit = Some((tb, Some(*class)));
                    }
                }
            }
            let px = &mut out[(row * w + col) * BASE_CHANNELS..(row * w + col + 1) * BASE_CHANNELS];
            let Some((depth, class)) = hit else { continue };
            px[CH_DEPTH] = (2.0 / depth).min(1.0);
            match class {
                Some(BoxClass::Agent) => px[CH_AGENT] = 1.0,
                Some(BoxClass::Obstacle) => px[CH_OBSTACLE] = 1.0,
                None if depth < MAP_RANGE_M => {
                    let g = [o[0] + depth * d[0], o[1] + depth * d[1]];
                    let dm = polyline_dist(g, &view.polylines);
                    let sigma = 0.4 + 0.02 * depth;
                    px[CH_MAP] = (-(dm * dm) / (2.0 * sigma * sigma)).exp();
                }
                None => {}
            }
        }
    }
    out
}

fn blur3(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for q in 0..w {
            let mut n = 0.0;
            let o = (r * w + q) * c;
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for qq in q.saturating_sub(1)..(q + 2).min(w) {
                    n += 1.0;
                    let i = (rr * w + qq) * c;
                    for k in 0..c {
                        out[o + k] += data[i + k];
                    }
                }
            }
            for k in 0..c {
                out[o + k] /= n;
            }
        }
    }
    out
}

fn pool2(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2 * c];
    for r in 0..h2 {
        for q in 0..w2 {
            let o = (r * w2 + q) * c;
            for (dr, dq) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = ((2 * r + dr) * w + 2 * q + dq) * c;
                for k in 0..c {
                    out[o + k] += 0.25 * data[i + k];
                }
            }
        }
    }
    out
}

/// Fixed mixing weights for the derived channels.
fn mix_weights(channels: usize) -> Vec<[f64; BASE_CHANNELS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED);
    (BASE_CHANNELS..channels)
        .map(|_| {
            let mut w = [0.0; BASE_CHANNELS];
            for x in &mut w {
                *x = rng.gen_range(-2.0..2.0);
            }
            w
        })
        .collect()
}

fn expand(base: &[f64], pixels: usize, channels: usize, mix: &[[f64; BASE_CHANNELS]]) -> Vec<f64> {
    let mut out = vec![0.0; pixels * channels];
    for p in 0..pixels {
        let b = &base[p * BASE_CHANNELS..(p + 1) * BASE_CHANNELS];
        let o = &mut out[p * channels..(p + 1) * channels];
        let keep = channels.min(BASE_CHANNELS);
        o[..keep].copy_from_slice(&b[..keep]);
        for (k, m) in mix.iter().enumerate() {
            let z: f64 = m.iter().zip(b).map(|(a, x)| a * x).sum();
            o[BASE_CHANNELS + k] = z.tanh();
        }
    }
    out
}

/// Renders `levels` scales of `channels`-wide features for every camera.
pub fn render_view(
    view: &EgoView,
    cams: &[CameraModel],
    channels: usize,
    levels: usize,
) -> Result<FeatureGrid> {
    if channels == 0 || levels == 0 {
        return Err(Error::Config("renderer needs channels and levels".into()));
    }
    let mix = mix_weights(channels);
    let mut maps = Vec::with_capacity(cams.len());
    for cam in cams {
        let (mut h, mut w) = (cam.height, cam.width);
        let mut level = blur3(&cast_base(view, cam), h, w, BASE_CHANNELS);
        let mut per = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "camera {} image {}x{} cannot be halved",
                        cam.name, w, h
                    )));
                }
                level = pool2(&level, h, w, BASE_CHANNELS);
                h /= 2;
                w /= 2;
            }
            let data = expand(&level, h * w, channels, &mix);
            per.push(Tensor::new(vec![h, w, channels], data)?);
        }
        maps.push(per);
    }
    Ok(FeatureGrid { maps })
}

/// Features seen from the expert's pose at time `t`.
pub fn render_features(scn: &Scenario, t: f64, channels: usize, levels: usize) -> Result<FeatureGrid> {
    let pose = scn.expert_pose(scn.expert_index(t));
    render_at(scn, &pose, t, channels, levels)
}

/// Features seen from an arbitrary ego pose at time `t`.
pub fn render_at(
    scn: &Scenario,
    pose: &Pose,
    t: f64,
    channels: usize,
    levels: usize,
) -> Result<FeatureGrid> {
    render_view(&EgoView::of(scn, pose, t)?, &scn.cameras, channels, levels)
}

//! Training samples built from expert demonstrations.

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::FrameInput;
use crate::planning_head::{Conditioning, GranularityLayout};
use crate::scene::families::EXPERT_DT;
use crate::scene::{frame_indices, frame_truth, render_at, FrameTruth, Pose, Scenario};
use crate::training::loss::style_targets;
use crate::trajectory::{build_gt, GroundTruth, Path};

/// Age of the remembered frame relative to the current one.
pub const MEMORY_LAG_S: f64 = 0.5;

/// Network input for an ego at `pose` driving at `speed`, with the route
/// target taken from the scenario's route.
pub fn observe(scn: &Scenario, path: &Path, pose: &Pose, speed: f64, t: f64, config: &RunConfig) -> Result<FrameInput> {
    let (s, _) = path.project(pose.position());
    let rp = scn.route_target(path, s);
    Ok(FrameInput {
        grid: render_at(scn, pose, t, config.model.channels, config.model.feature_levels)?,
        cams: scn.cameras.iter().map(|c| c.pinhole()).collect(),
        cond: Conditioning {
            target: pose.to_local(rp.position),
            command: rp.command,
            speed,
        },
    })
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub scenario: String,
    pub frame: usize,
    pub input: FrameInput,
    /// Input `MEMORY_LAG_S` earlier, run first to fill the memory.
    pub prev: FrameInput,
    pub truth: FrameTruth,
    pub gt: GroundTruth,
    /// Driving-style bin per frequency group.
    pub style_bins: Vec<usize>,
}

fn expert_input(scn: &Scenario, path: &Path, k: usize, config: &RunConfig) -> Result<FrameInput> {
    let t = scn.expert.timestamps()[k];
    observe(scn, path, &scn.expert_pose(k), scn.expert_speed[k], t, config)
}

/// Samples at the configured frame stride of every scenario.
pub fn build_samples(scenarios: &[Scenario], layout: &GranularityLayout, config: &RunConfig) -> Result<Vec<Sample>> {
    let bins = config.granularity.speed_bins()?;
    let lag = (MEMORY_LAG_S / EXPERT_DT).round() as usize;
    let mut out = Vec::new();
    for scn in scenarios {
        let path = scn.expert_path()?;
        for k in frame_indices(scn, config.scene.frame_stride_s, config.scene.max_frames_per_scenario)? {
            let truth = frame_truth(scn, k, config.model.map_points)?;
            let gt = build_gt(&truth.future, &layout.specs)?;
            out.push(Sample {
                scenario: scn.id.clone(),
                frame: k,
                input: expert_input(scn, &path, k, config)?,
                prev: expert_input(scn, &path, k.saturating_sub(lag), config)?,
                style_bins: style_targets(&gt, layout, &bins)?,
                truth,
                gt,
            });
        }
    }
    Ok(out)
}

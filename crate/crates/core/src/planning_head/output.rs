use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::planning_head::head::PlanningVars;
use crate::trajectory::{GranularitySpec, Point2, WaypointSet};

pub const PLAN_CSV_HEADER: &str = "modality,granularity_id,index,x,y";

/// Decoded planning predictions of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanningOutput {
    pub specs: Vec<GranularitySpec>,
    /// `[modality][granularity][waypoint]`.
    pub waypoints: Vec<Vec<Vec<Point2>>>,
    pub modality_scores: Vec<f64>,
    /// `[modality][speed bin]`.
    pub style_scores: Option<Vec<Vec<f64>>>,
}

/// Scores written next to the waypoint CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresSidecar {
    pub modality_scores: Vec<f64>,
    pub style_scores: Option<Vec<Vec<f64>>>,
}

fn points(row: &[f64]) -> Vec<Point2> {
    row.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl PlanningOutput {
    pub fn from_vars(tape: &Tape, vars: &PlanningVars, specs: &[GranularitySpec]) -> Result<Self> {
        if vars.waypoints.len() != specs.len() {
            return Err(Error::Layout("waypoint sets do not match the layout".into()));
        }
        let m = tape.shape(vars.modality)[0];
        let waypoints = (0..m)
            .map(|i| vars.waypoints.iter().map(|&w| points(tape.value(w).row(i))).collect())
            .collect();
        let style_scores = vars
            .style
            .map(|s| (0..m).map(|i| tape.value(s).row(i).to_vec()).collect());
        Ok(Self {
            specs: specs.to_vec(),
            waypoints,
            modality_scores: tape.value(vars.modality).data().to_vec(),
            style_scores,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.waypoints.len()
    }

    pub fn set(&self, modality: usize, granularity: usize) -> WaypointSet {
        WaypointSet::unpadded(
            self.specs[granularity].clone(),
            self.waypoints[modality][granularity].clone(),
        )
    }

    pub fn best_modality(&self) -> usize {
        argmax(&self.modality_scores)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PLAN_CSV_HEADER}")?;
        for (i, sets) in self.waypoints.iter().enumerate() {
            for (spec, pts) in self.specs.iter().zip(sets) {
                for (k, p) in pts.iter().enumerate() {
                    writeln!(w, "{i},{},{k},{},{}", spec.id(), p[0], p[1])?;
                }
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> ScoresSidecar {
        ScoresSidecar {
            modality_scores: self.modality_scores.clone(),
            style_scores: self.style_scores.clone(),
        }
    }
}

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::trajectory::granularity::{
    resample_spatial, resample_temporal, GranularityKind, GranularitySpec, WaypointSet,
};
use crate::trajectory::path::{dist, fit_path, Trajectory};

/// Ground truth for every granularity of one sample, in spec order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub sets: Vec<WaypointSet>,
    /// Per set, per waypoint speed `|w[k] - w[k-1]| · f` (with `w[-1]` the
    /// trajectory start); empty for spatial sets.
    pub step_speeds: Vec<Vec<f64>>,
    /// The future path was degenerate; every spatial set is fully padded.
    pub spatial_padded: bool,
}

impl GroundTruth {
    pub fn set(&self, spec: &GranularitySpec) -> Option<&WaypointSet> {
        self.sets.iter().find(|s| &s.spec == spec)
    }
}

fn step_speeds(set: &WaypointSet, start: [f64; 2]) -> Vec<f64> {
    let f = set.spec.frequency();
    let mut prev = start;
    set.waypoints
        .iter()
        .map(|&w| {
            let v = dist(prev, w) * f;
            prev = w;
            v
        })
        .collect()
}

/// Samples every granularity from one future trajectory. Temporal and
/// driving-style sets at the same frequency share one array.
pub fn build_gt(traj: &Trajectory, specs: &[GranularitySpec]) -> Result<GroundTruth> {
    let path = match fit_path(traj) {
        Ok(p) => Some(p),
        Err(Error::DegeneratePath(_)) => None,
        Err(e) => return Err(e),
    };
    let start = traj.position_at(traj.timestamps()[0]).0;
    let mut sets = Vec::with_capacity(specs.len());
    let mut speeds = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let set = match spec.kind {
            GranularityKind::Spatial => match &path {
                Some(p) => resample_spatial(p, spec.interval(), spec.horizon)?,
                None => WaypointSet {
                    spec: spec.clone(),
                    waypoints: vec![start; spec.horizon],
                    padded: vec![true; spec.horizon],
                },
            },
            GranularityKind::Temporal | GranularityKind::DrivingStyle => {
                let mut s = resample_temporal(traj, spec.frequency(), spec.horizon)?;
                s.spec = spec.clone();
                s
            }
        };
        speeds.push(if spec.is_time_indexed() {
            step_speeds(&set, start)
        } else {
            Vec::new()
        });
        sets.push(set);
    }
    Ok(GroundTruth {
        sets,
        step_speeds: speeds,
        spatial_padded: path.is_none(),
    })
}

pub const GT_CSV_HEADER: &str = "granularity_id,index,x,y,padded,speed";

/// Writes `granularity_id,index,x,y,padded,speed` rows; speed is empty for
/// spatial sets. Floats use Rust's shortest round-trip formatting.
pub fn write_gt_csv<W: Write>(mut w: W, gt: &GroundTruth) -> Result<()> {
    writeln!(w, "{GT_CSV_HEADER}")?;
    for (set, sp) in gt.sets.iter().zip(&gt.step_speeds) {
        write_set_rows(&mut w, set, sp)?;
    }
    Ok(())
}

pub fn write_set_rows<W: Write>(w: &mut W, set: &WaypointSet, speeds: &[f64]) -> Result<()> {
    let id = set.spec.id();
    for (i, (p, pad)) in set.waypoints.iter().zip(&set.padded).enumerate() {
        let speed = speeds.get(i).map(|v| format!("{v}")).unwrap_or_default();
        writeln!(w, "{id},{i},{},{},{},{speed}", p[0], p[1], *pad as u8)?;
    }
    Ok(())
}

/// One parsed row of a GT / waypoint CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct GtRow {
    pub granularity_id: String,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub padded: bool,
    pub speed: Option<f64>,
}

pub fn read_gt_csv<R: BufRead>(r: R) -> Result<Vec<GtRow>> {
    let mut rows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if n == 0 {
            if line.trim() != GT_CSV_HEADER {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected header `{GT_CSV_HEADER}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad number `{s}`: {e}"),
            })
        };
        rows.push(GtRow {
            granularity_id: f[0].to_string(),
            index: f[1].trim().parse().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("bad index `{}`: {e}", f[1]),
            })?,
            x: num(f[2])?,
            y: num(f[3])?,
            padded: match f[4].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("bad padded flag `{other}`"),
                    })
                }
            },
            speed: if f[5].trim().is_empty() {
                None
            } else {
                Some(num(f[5])?)
            },
        });
    }
    Ok(rows)
}

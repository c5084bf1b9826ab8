use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::path::{Path, Point2, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityKind {
    Temporal,
    Spatial,
    DrivingStyle,
}

/// One sampling configuration of a waypoint type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub kind: GranularityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_bin: Option<usize>,
    pub horizon: usize,
}

impl GranularitySpec {
    pub fn temporal(frequency_hz: f64, horizon: usize) -> Self {
        Self {
            kind: GranularityKind::Temporal,
            frequency_hz: Some(frequency_hz),
            interval_m: None,
            speed_bin: None,
            horizon,
        }
    }

    pub fn spatial(interval_m: f64, horizon: usize) -> Self {
        Self {
            kind: GranularityKind::Spatial,
            frequency_hz: None,
            interval_m: Some(interval_m),
            speed_bin: None,
            horizon,
        }
    }

    pub fn driving_style(speed_bin: usize, frequency_hz: f64, horizon: usize) -> Self {
        Self {
            kind: GranularityKind::DrivingStyle,
            frequency_hz: Some(frequency_hz),
            interval_m: None,
            speed_bin: Some(speed_bin),
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: Option<f64>| v.map(|x| x.is_finite() && x > 0.0).unwrap_or(false);
        let ok = self.horizon > 0
            && match self.kind {
                GranularityKind::Temporal => positive(self.frequency_hz),
                GranularityKind::Spatial => positive(self.interval_m),
                GranularityKind::DrivingStyle => {
                    positive(self.frequency_hz) && self.speed_bin.is_some()
                }
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid granularity spec {self:?}")))
        }
    }

    pub fn frequency(&self) -> f64 {
        self.frequency_hz.unwrap_or(0.0)
    }

    pub fn interval(&self) -> f64 {
        self.interval_m.unwrap_or(0.0)
    }

    pub fn is_time_indexed(&self) -> bool {
        self.kind != GranularityKind::Spatial
    }

    /// Stable identifier such as `temporal_2hz`, `spatial_5m`, `style1_5hz`.
    pub fn id(&self) -> String {
        let num = |x: f64| {
            if x.fract() == 0.0 {
                format!("{}", x as i64)
            } else {
                format!("{x}").replace('.', "p")
            }
        };
        match self.kind {
            GranularityKind::Temporal => format!("temporal_{}hz", num(self.frequency())),
            GranularityKind::Spatial => format!("spatial_{}m", num(self.interval())),
            GranularityKind::DrivingStyle => format!(
                "style{}_{}hz",
                self.speed_bin.unwrap_or(0),
                num(self.frequency())
            ),
        }
    }
}

/// Waypoints sampled under one granularity. Padded entries are clamped copies
/// of the last reachable position and carry no supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointSet {
    pub spec: GranularitySpec,
    pub waypoints: Vec<Point2>,
    pub padded: Vec<bool>,
}

impl WaypointSet {
    pub fn unpadded(spec: GranularitySpec, waypoints: Vec<Point2>) -> Self {
        let padded = vec![false; waypoints.len()];
        Self {
            spec,
            waypoints,
            padded,
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn num_unpadded(&self) -> usize {
        self.padded.iter().filter(|p| !**p).count()
    }

    /// Speeds implied by consecutive unpadded waypoints (time-indexed sets
    /// only): `|w[k+1] - w[k]| * frequency`.
    pub fn implied_speeds(&self) -> Vec<f64> {
        let f = self.spec.frequency();
        self.waypoints
            .windows(2)
            .zip(self.padded.windows(2))
            .filter(|(_, p)| !p[0] && !p[1])
            .map(|(w, _)| crate::trajectory::path::dist(w[0], w[1]) * f)
            .collect()
    }
}

/// Waypoints at arc lengths `interval·1 ..= interval·horizon`; samples past
/// the end of the path clamp to its endpoint and are flagged padded.
pub fn resample_spatial(path: &Path, interval_m: f64, horizon: usize) -> Result<WaypointSet> {
    let spec = GranularitySpec::spatial(interval_m, horizon);
    spec.validate()?;
    let len = path.length();
    let mut waypoints = Vec::with_capacity(horizon);
    let mut padded = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let s = interval_m * (i + 1) as f64;
        waypoints.push(path.at(s));
        padded.push(s > len * (1.0 + 1e-12));
    }
    Ok(WaypointSet {
        spec,
        waypoints,
        padded,
    })
}

/// Waypoints at `t = (i+1)/frequency` by linear interpolation in time;
/// samples past the last timestamp clamp to the final position (padded).
pub fn resample_temporal(
    traj: &Trajectory,
    frequency_hz: f64,
    horizon: usize,
) -> Result<WaypointSet> {
    let spec = GranularitySpec::temporal(frequency_hz, horizon);
    spec.validate()?;
    let mut waypoints = Vec::with_capacity(horizon);
    let mut padded = Vec::with_capacity(horizon);
    for i in 0..horizon {
        let (p, pad) = traj.position_at((i + 1) as f64 / frequency_hz);
        waypoints.push(p);
        padded.push(pad);
    }
    Ok(WaypointSet {
        spec,
        waypoints,
        padded,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous, left-closed right-open speed ranges in m/s. Speeds at or above
/// the top boundary clamp into the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedBins {
    boundaries: Vec<f64>,
}

impl Default for SpeedBins {
    /// Parking `[0, 0.4)`, low-speed `[0.4, 3)`, normal `[3, 10)`.
    fn default() -> Self {
        Self {
            boundaries: vec![0.0, 0.4, 3.0, 10.0],
        }
    }
}

impl SpeedBins {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2
            || boundaries[0] != 0.0
            || boundaries.windows(2).any(|w| !(w[1] > w[0]))
            || boundaries.iter().any(|b| !b.is_finite())
        {
            return Err(Error::Config(format!(
                "speed bin boundaries must start at 0 and increase: {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn len(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// `[lo, hi)` of bin `i`.
    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.boundaries[i], self.boundaries[i + 1])
    }

    /// Index of the bin containing `speed_mps`.
    pub fn classify(&self, speed_mps: f64) -> Result<usize> {
        if !(speed_mps >= 0.0) {
            return Err(Error::Contract(format!(
                "speed must be non-negative, got {speed_mps}"
            )));
        }
        let k = self.boundaries.partition_point(|&b| b <= speed_mps);
        Ok(k.saturating_sub(1).min(self.len() - 1))
    }
}

pub fn classify_speed(speed_mps: f64, bins: &SpeedBins) -> Result<usize> {
    bins.classify(speed_mps)
}

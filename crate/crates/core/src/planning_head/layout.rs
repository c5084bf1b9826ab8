use crate::config::GranularityConfig;
use crate::error::{Error, Result};
use crate::trajectory::{GranularityKind, GranularitySpec};

/// `N_g = n_t + n_s + n_d·n_t`.
pub fn num_granularities(n_t: usize, n_s: usize, n_d: usize) -> usize {
    n_t + n_s + n_d * n_t
}

/// Ordered granularities of the planning queries. Rows of the planning
/// query matrix are modality-major: row `i·N_g + j` is modality `i`,
/// granularity `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularityLayout {
    pub n_t: usize,
    pub n_s: usize,
    pub n_d: usize,
    pub modalities: usize,
    pub specs: Vec<GranularitySpec>,
}

impl GranularityLayout {
    /// Specs must come temporal first, then spatial, then for each speed
    /// bin one driving-style set per temporal frequency.
    pub fn new(specs: Vec<GranularitySpec>, modalities: usize) -> Result<Self> {
        if modalities == 0 || specs.is_empty() {
            return Err(Error::Layout("layout needs modalities and granularities".into()));
        }
        let count = |k| specs.iter().filter(|s| s.kind == k).count();
        let n_t = count(GranularityKind::Temporal);
        let n_s = count(GranularityKind::Spatial);
        let n_style = count(GranularityKind::DrivingStyle);
        if n_style > 0 && (n_t == 0 || n_style % n_t != 0) {
            return Err(Error::Layout(format!(
                "{n_style} driving-style sets do not split over {n_t} temporal frequencies"
            )));
        }
        let n_d = if n_t == 0 { 0 } else { n_style / n_t };
        let layout = Self {
            n_t,
            n_s,
            n_d,
            modalities,
            specs,
        };
        for (j, s) in layout.specs.iter().enumerate() {
            s.validate()?;
            let expected = if j < n_t {
                GranularityKind::Temporal
            } else if j < n_t + n_s {
                GranularityKind::Spatial
            } else {
                GranularityKind::DrivingStyle
            };
            if s.kind != expected {
                return Err(Error::Layout(format!("granularity {j} ({}) is out of order", s.id())));
            }
            if s.kind == GranularityKind::DrivingStyle {
                let k = j - n_t - n_s;
                let (bin, f) = (k / n_t, k % n_t);
                if s.speed_bin != Some(bin) || s.frequency() != layout.specs[f].frequency() {
                    return Err(Error::Layout(format!("driving-style set {} is out of order", s.id())));
                }
            }
        }
        Ok(layout)
    }

    pub fn from_config(g: &GranularityConfig, modalities: usize) -> Result<Self> {
        Self::new(g.specs()?, modalities)
    }

    pub fn num_granularities(&self) -> usize {
        self.specs.len()
    }

    pub fn num_queries(&self) -> usize {
        self.modalities * self.num_granularities()
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.horizon).collect()
    }

    pub fn row(&self, modality: usize, granularity: usize) -> usize {
        modality * self.num_granularities() + granularity
    }

    pub fn temporal(&self, hz: f64) -> Option<usize> {
        self.specs[..self.n_t].iter().position(|s| s.frequency() == hz)
    }

    pub fn spatial(&self) -> std::ops::Range<usize> {
        self.n_t..self.n_t + self.n_s
    }

    /// Driving-style granularity for speed bin `bin` at the frequency of
    /// temporal granularity `f`.
    pub fn style(&self, bin: usize, f: usize) -> Option<usize> {
        (bin < self.n_d && f < self.n_t).then(|| self.n_t + self.n_s + bin * self.n_t + f)
    }

    /// Temporal granularity used to match modalities: 2 Hz when present,
    /// otherwise the first temporal set.
    pub fn reference(&self) -> Result<usize> {
        if self.n_t == 0 {
            return Err(Error::Layout("matching needs a temporal granularity".into()));
        }
        Ok(self.temporal(2.0).unwrap_or(0))
    }

    /// Highest-frequency temporal granularity.
    pub fn high_frequency(&self) -> Option<usize> {
        (0..self.n_t).max_by(|&a, &b| self.specs[a].frequency().total_cmp(&self.specs[b].frequency()))
    }

    /// Spatial granularity with the smallest interval.
    pub fn dense_spatial(&self) -> Option<usize> {
        self.spatial()
            .min_by(|&a, &b| self.specs[a].interval().total_cmp(&self.specs[b].interval()))
    }
}

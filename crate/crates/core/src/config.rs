//! Run configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trajectory::{GranularitySpec, SpeedBins};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub layers: usize,
    pub agent_queries: usize,
    pub map_queries: usize,
    pub map_points: usize,
    pub modalities: usize,
    /// Heights (m) at which BEV reference points are lifted.
    pub ref_heights: Vec<f64>,
    /// Waypoints per planning query used as deformable reference points.
    pub plan_ref_points: usize,
    pub samples_per_ref: usize,
    pub feature_levels: usize,
    pub offset_range_px: f64,
    pub tau_hidden: usize,
    pub tau_bias_init: f64,
    pub ffn_hidden: usize,
    pub memory_slots: usize,
    pub topk_agent: usize,
    pub topk_map: usize,
    /// Per-layer refinement bounds (m) for agent boxes, map points and
    /// planning reference points.
    pub agent_refine_m: f64,
    pub map_refine_m: f64,
    pub plan_refine_m: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            layers: 3,
            agent_queries: 8,
            map_queries: 4,
            map_points: 4,
            modalities: 6,
            ref_heights: vec![0.0, 0.5, 1.0],
            plan_ref_points: 4,
            samples_per_ref: 4,
            feature_levels: 2,
            offset_range_px: 8.0,
            tau_hidden: 16,
            tau_bias_init: -3.0,
            ffn_hidden: 64,
            memory_slots: 5,
            topk_agent: 4,
            topk_map: 0,
            agent_refine_m: 1.0,
            map_refine_m: 1.0,
            plan_refine_m: 1.0,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GranularityConfig {
    pub temporal_hz: Vec<f64>,
    pub temporal_horizon_s: f64,
    pub spatial_m: Vec<f64>,
    pub spatial_points: Vec<usize>,
    pub driving_style: bool,
    pub speed_bins: Vec<f64>,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            temporal_hz: vec![2.0, 5.0],
            temporal_horizon_s: 3.0,
            spatial_m: vec![5.0, 2.0],
            spatial_points: vec![6, 10],
            driving_style: true,
            speed_bins: vec![0.0, 0.4, 3.0, 10.0],
        }
    }
}

impl GranularityConfig {
    pub fn speed_bins(&self) -> Result<SpeedBins> {
        SpeedBins::new(self.speed_bins.clone())
    }

    pub fn temporal_horizon(&self, hz: f64) -> usize {
        (self.temporal_horizon_s * hz).round() as usize
    }

    /// Temporal, then spatial, then per speed bin one set per temporal
    /// frequency.
    pub fn specs(&self) -> Result<Vec<GranularitySpec>> {
        if self.spatial_m.len() != self.spatial_points.len() {
            return Err(Error::Config(format!(
                "{} spatial intervals but {} spatial horizons",
                self.spatial_m.len(),
                self.spatial_points.len()
            )));
        }
        let mut specs = Vec::new();
        for &f in &self.temporal_hz {
            specs.push(GranularitySpec::temporal(f, self.temporal_horizon(f)));
        }
        for (&d, &t) in self.spatial_m.iter().zip(&self.spatial_points) {
            specs.push(GranularitySpec::spatial(d, t));
        }
        if self.driving_style {
            let bins = self.speed_bins()?;
            for b in 0..bins.len() {
                for &f in &self.temporal_hz {
                    specs.push(GranularitySpec::driving_style(b, f, self.temporal_horizon(f)));
                }
            }
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
    /// Seconds between consecutive training frames of one scenario.
    pub frame_stride_s: f64,
    pub max_frames_per_scenario: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_width: 48,
            image_height: 24,
            train_scenarios: 36,
            eval_scenarios: 24,
            frame_stride_s: 1.0,
            max_frames_per_scenario: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub det: f64,
    pub motion: f64,
    pub map: f64,
    pub plan_reg: f64,
    pub plan_cls: f64,
    pub plan_style: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            det: 1.0,
            motion: 1.0,
            map: 1.0,
            plan_reg: 1.0,
            plan_cls: 1.0,
            plan_style: 1.0,
            aux: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub smooth_l1_beta: f64,
    pub divergence_loss: f64,
    pub weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 6,
            phase2_epochs: 4,
            batch_size: 4,
            lr: 2e-3,
            lr_min: 1e-4,
            weight_decay: 0.01,
            smooth_l1_beta: 1.0,
            divergence_loss: 1e6,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub lookahead_max: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub kp: f64,
    pub ki: f64,
    pub integral_limit: f64,
    /// Waypoint sets spanning less than this (m) are read as a stop.
    pub stop_span_m: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            lookahead_gain: 1.0,
            lookahead_min: 2.0,
            lookahead_max: 8.0,
            wheelbase: 2.8,
            max_steer: 0.6,
            max_accel: 3.0,
            max_decel: 6.0,
            kp: 1.5,
            ki: 0.1,
            integral_limit: 5.0,
            stop_span_m: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub time_budget_s: f64,
    pub collision_margin_m: f64,
    pub off_route_m: f64,
    pub goal_tolerance_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            time_budget_s: 40.0,
            collision_margin_m: 0.1,
            off_route_m: 4.0,
            goal_tolerance_m: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub granularity: GranularityConfig,
    pub scene: SceneConfig,
    pub training: TrainingConfig,
    pub control: ControlConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            granularity: GranularityConfig::default(),
            scene: SceneConfig::default(),
            training: TrainingConfig::default(),
            control: ControlConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.channels", m.channels),
            ("model.layers", m.layers),
            ("model.agent_queries", m.agent_queries),
            ("model.map_queries", m.map_queries),
            ("model.map_points", m.map_points),
            ("model.modalities", m.modalities),
            ("model.plan_ref_points", m.plan_ref_points),
            ("model.samples_per_ref", m.samples_per_ref),
            ("model.feature_levels", m.feature_levels),
            ("model.tau_hidden", m.tau_hidden),
            ("model.ffn_hidden", m.ffn_hidden),
            ("model.memory_slots", m.memory_slots),
            ("scene.image_width", self.scene.image_width),
            ("scene.image_height", self.scene.image_height),
            ("training.batch_size", self.training.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if m.ref_heights.is_empty() {
            return Err(Error::Config("model.ref_heights must not be empty".into()));
        }
        if m.topk_agent > m.agent_queries || m.topk_map > m.map_queries {
            return Err(Error::Config("memory top-k exceeds the query count".into()));
        }
        if self.scene.image_width % 2 != 0 || self.scene.image_height % 2 != 0 {
            return Err(Error::Config("image size must be even".into()));
        }
        if m.feature_levels > 2 {
            return Err(Error::Config("at most two feature levels are rendered".into()));
        }
        let specs = self.granularity.specs()?;
        if specs.is_empty() {
            return Err(Error::Config("no granularities configured".into()));
        }
        if self.granularity.temporal_hz.is_empty() {
            return Err(Error::Config(
                "at least one temporal granularity is required".into(),
            ));
        }
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        let w = &t.weights;
        if [w.det, w.motion, w.map, w.plan_reg, w.plan_cls, w.plan_style, w.aux]
            .iter()
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(t.smooth_l1_beta > 0.0) {
            return Err(Error::Config("training.smooth_l1_beta must be positive".into()));
        }
        if t.phase1_epochs + t.phase2_epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        let c = &self.control;
        if !(c.lookahead_min > 0.0 && c.lookahead_min <= c.lookahead_max && c.wheelbase > 0.0) {
            return Err(Error::Config("bad pure-pursuit parameters".into()));
        }
        if !(self.sim.dt > 0.0 && self.sim.time_budget_s > 0.0) {
            return Err(Error::Config("sim.dt and sim.time_budget_s must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_toml_str("seed = 1\n[model]\nchanels = 8\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[model]\nchannels = 16\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.channels, 16);
        assert_eq!(c.model.layers, 3);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_layout_has_ten_granularities() {
        let specs = RunConfig::default().granularity.specs().unwrap();
        assert_eq!(specs.len(), 2 + 2 + 3 * 2);
        let ids: Vec<String> = specs.iter().map(|s| s.id()).collect();
        assert_eq!(ids[0], "temporal_2hz");
        assert_eq!(specs[0].horizon, 6);
        assert_eq!(specs[1].horizon, 15);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("[model]\nchannels = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[granularity]\ntemporal_hz = []\n").is_err());
        assert!(RunConfig::from_toml_str("[granularity]\nspeed_bins = [0.0, 3.0, 1.0]\n").is_err());
    }
}

//! The full network: learned queries and anchors, the decoder, the
//! planning head and the perception heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::decoder::{
    feature_vars, grid_agent_anchors, kmeans, topk_store, Decoder, DecoderInput, DecoderShape, MemoryBank,
    MemorySlot, QuerySet, QueryVars, TaskScores, TauMode,
};
use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{Activation, Bound, Mlp, ParamId, ParamStore, Pinhole, Tape, Tensor, Var};
use crate::planning_head::{Conditioning, GranularityLayout, PlanningHead, PlanningOutput, PlanningVars};
use crate::scene::frames::MOTION_STEPS;
use crate::scene::FeatureGrid;
use crate::trajectory::{build_gt, Point2, Trajectory};

/// Seconds of expert future clustered into planning anchors.
pub const ANCHOR_HORIZON_S: f64 = 4.0;
const ANCHOR_DT: f64 = 0.1;

/// Everything the network sees at one step.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub grid: FeatureGrid,
    pub cams: Vec<Pinhole>,
    pub cond: Conditioning,
}

/// Network outputs on the tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub queries: QueryVars,
    pub plan: PlanningVars,
    /// `[N_a, 1]` agent existence logits.
    pub agent_cls: Var,
    /// `[N_a, 2·MOTION_STEPS]` future displacements.
    pub motion: Var,
    /// `[N_map, 1]` map element existence logits.
    pub map_cls: Var,
    /// `[1, 2]`: speed / 5 and yaw rate.
    pub ego: Var,
}

/// Result of one inference step.
#[derive(Clone, Debug)]
pub struct Inference {
    pub output: PlanningOutput,
    pub queries: QuerySet,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub layout: GranularityLayout,
    pub store: ParamStore,
    pub decoder: Decoder,
    pub head: PlanningHead,
    pub agent_query: ParamId,
    pub map_query: ParamId,
    pub agent_anchors: ParamId,
    pub map_anchors: ParamId,
    pub plan_anchors: Vec<ParamId>,
    pub agent_cls: Mlp,
    pub motion: Mlp,
    pub map_cls: Mlp,
    pub ego: Mlp,
}

/// Straight-ahead anchor trajectories at evenly spread speeds.
fn default_plan_futures(n: usize) -> Vec<Trajectory> {
    (0..n)
        .map(|i| {
            let v = 10.0 * (i as f64 + 0.5) / n as f64;
            let steps = (ANCHOR_HORIZON_S / ANCHOR_DT).round() as usize;
            let ts: Vec<f64> = (0..=steps).map(|k| k as f64 * ANCHOR_DT).collect();
            let pts = ts.iter().map(|t| [v * t, 0.0]).collect();
            Trajectory::new(pts, ts).expect("increasing stamps")
        })
        .collect()
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let layout = GranularityLayout::from_config(&config.granularity, m.modalities)?;
        let mut rng = ChaCha8Rng::seed_from_u64(m.init_seed);
        let mut store = ParamStore::new();
        let c = m.channels;
        let agent_query = store.uniform("query.agent", &[m.agent_queries, c], 1, &mut rng)?;
        let map_query = store.uniform("query.map", &[m.map_queries, c], 1, &mut rng)?;
        let agent_anchors = store.insert("anchor.agent", grid_agent_anchors(m.agent_queries), false)?;
        let mut map_init = Tensor::zeros(&[m.map_queries, 2 * m.map_points]);
        for r in 0..m.map_queries {
            let y = -6.0 + 12.0 * (r as f64 + 0.5) / m.map_queries as f64;
            for p in 0..m.map_points {
                let x = 30.0 * p as f64 / (m.map_points.max(2) - 1) as f64;
                map_init.data_mut()[r * 2 * m.map_points + 2 * p] = x;
                map_init.data_mut()[r * 2 * m.map_points + 2 * p + 1] = y;
            }
        }
        let map_anchors = store.insert("anchor.map", map_init, false)?;
        let plan_init = plan_anchor_tensors(&default_plan_futures(m.modalities), &layout)?;
        let plan_anchors = plan_init
            .into_iter()
            .enumerate()
            .map(|(j, t)| store.insert(&format!("anchor.plan.{j}"), t, false))
            .collect::<Result<_>>()?;
        let shape = DecoderShape::from_config(m, layout.horizons());
        let decoder = Decoder::new(&mut store, "decoder", shape, &mut rng)?;
        let head = PlanningHead::new(&mut store, "plan", layout.clone(), c, &mut rng)?;
        let mlp = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
            Mlp::new(store, name, &[c, c, out], Activation::Relu, rng)
        };
        let agent_cls = mlp(&mut store, "head.agent_cls", 1, &mut rng)?;
        let motion = Mlp::zero_last(&mut store, "head.motion", &[c, c, 2 * MOTION_STEPS], Activation::Relu, &mut rng)?;
        let map_cls = mlp(&mut store, "head.map_cls", 1, &mut rng)?;
        let ego = mlp(&mut store, "head.ego", 2, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            layout,
            store,
            decoder,
            head,
            agent_query,
            map_query,
            agent_anchors,
            map_anchors,
            plan_anchors,
            agent_cls,
            motion,
            map_cls,
            ego,
        })
    }

    /// Memory bank sized for this model: top-k agents and map elements,
    /// every planning query.
    pub fn memory_bank(&self) -> Result<MemoryBank> {
        self.memory_bank_with(self.config.model.memory_slots)
    }

    pub fn memory_bank_with(&self, slots: usize) -> Result<MemoryBank> {
        let m = &self.config.model;
        MemoryBank::new(slots, m.topk_agent, m.topk_map, self.layout.num_queries())
    }

    /// Re-initializes planning anchors by k-means over expert futures and
    /// map anchors by k-means over map polylines.
    pub fn fit_anchors(&mut self, futures: &[Trajectory], polylines: &[Vec<Point2>]) -> Result<()> {
        let seed = self.config.model.init_seed;
        let steps = (ANCHOR_HORIZON_S / ANCHOR_DT).round() as usize;
        let ts: Vec<f64> = (0..=steps).map(|k| k as f64 * ANCHOR_DT).collect();
        let flat: Vec<Vec<f64>> = futures
            .iter()
            .map(|f| ts[1..].iter().flat_map(|&t| f.position_at(t).0).collect())
            .collect();
        if !flat.is_empty() {
            let centers = kmeans(&flat, self.layout.modalities, 50, seed)?;
            let trajs = centers
                .iter()
                .map(|c| {
                    let mut pts = vec![[0.0, 0.0]];
                    pts.extend(c.chunks(2).map(|p| [p[0], p[1]]));
                    Trajectory::new(pts, ts.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            for (id, t) in self.plan_anchors.clone().into_iter().zip(plan_anchor_tensors(&trajs, &self.layout)?) {
                *self.store.get_mut(id) = t;
            }
        }
        let p = self.config.model.map_points;
        let lines: Vec<Vec<f64>> = polylines
            .iter()
            .filter(|l| l.len() == p)
            .map(|l| l.iter().flatten().copied().collect())
            .collect();
        if !lines.is_empty() {
            let centers = kmeans(&lines, self.config.model.map_queries, 50, seed)?;
            let t = Tensor::from_rows(&centers)?;
            *self.store.get_mut(self.map_anchors) = t;
        }
        Ok(())
    }

    pub fn initial_queries(&self, tape: &mut Tape, b: &Bound, cond: &Conditioning) -> Result<QueryVars> {
        Ok(QueryVars {
            agent_anchors: b.var(self.agent_anchors),
            agent: b.var(self.agent_query),
            map_anchors: b.var(self.map_anchors),
            map: b.var(self.map_query),
            plan_anchors: self.plan_anchors.iter().map(|&id| b.var(id)).collect(),
            plan: self.head.build_queries(tape, b, cond)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        input: &FrameInput,
        memory: Option<&MemorySlot>,
        style_on: bool,
    ) -> Result<ModelVars> {
        let q = self.initial_queries(tape, b, &input.cond)?;
        let din = DecoderInput {
            maps: feature_vars(tape, &input.grid),
            cams: input.cams.clone(),
            memory,
            tau: TauMode::Learned,
        };
        let outs = self.decoder.forward(tape, b, q, &din)?;
        let last = outs.last().expect("at least one layer").clone();
        let plan = self.head.forward(tape, b, last.plan, &last.plan_anchors, style_on)?;
        let agent_cls = self.agent_cls.forward(tape, b, last.agent)?;
        let motion = self.motion.forward(tape, b, last.agent)?;
        let map_cls = self.map_cls.forward(tape, b, last.map)?;
        let n = tape.shape(plan.fused)[0];
        let pooled = tape.group_sum_rows(plan.fused, n)?;
        let pooled = tape.scale(pooled, 1.0 / n as f64);
        let ego = self.ego.forward(tape, b, pooled)?;
        Ok(ModelVars {
            queries: last,
            plan,
            agent_cls,
            motion,
            map_cls,
            ego,
        })
    }

    /// Reads the active memory slot, runs the network, then stores this
    /// step's top-k queries in that slot and advances the bank.
    pub fn infer(&self, input: &FrameInput, memory: &mut MemoryBank, style_on: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let slot = memory.read().cloned();
        let vars = self.forward(&mut tape, &b, input, slot.as_ref(), style_on)?;
        let queries = vars.queries.values(&tape);
        let output = PlanningOutput::from_vars(&tape, &vars.plan, &self.layout.specs)?;
        let g = self.layout.num_granularities();
        let plan_scores: Vec<f64> = (0..self.layout.num_queries())
            .map(|r| output.modality_scores[r / g])
            .collect();
        topk_store(
            &queries,
            TaskScores {
                agent: tape.value(vars.agent_cls).data(),
                map: tape.value(vars.map_cls).data(),
                plan: &plan_scores,
            },
            memory,
        )?;
        Ok(Inference { output, queries })
    }

    /// Checkpoint metadata is the run config as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &serde_json::to_string(&self.config)?, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, stored) = checkpoint::load(path)?;
        let config: RunConfig =
            serde_json::from_str(&meta).map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(&config)?;
        checkpoint::restore_into(&mut model.store, &stored)?;
        Ok(model)
    }

    /// Loads a checkpoint and checks that it was trained with `expected`'s
    /// network settings.
    pub fn load_matching(path: &Path, expected: &RunConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config.model != expected.model || model.config.granularity != expected.granularity {
            return Err(Error::Load(format!(
                "{} was trained with a different model or granularity config",
                path.display()
            )));
        }
        Ok(model)
    }
}

/// Per granularity `[N_m, 2·T_j]` anchors sampled from one trajectory per
/// modality.
pub fn plan_anchor_tensors(trajs: &[Trajectory], layout: &GranularityLayout) -> Result<Vec<Tensor>> {
    let gts = trajs
        .iter()
        .map(|t| build_gt(t, &layout.specs))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..layout.num_granularities())
        .map(|j| {
            let rows: Vec<Vec<f64>> = gts
                .iter()
                .map(|gt| gt.sets[j].waypoints.iter().flatten().copied().collect())
                .collect();
            Tensor::from_rows(&rows).expect("equal horizons")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{default_rig, generate, render_features, Command, Family};
    use crate::test_support::tiny_config;

    fn input(c: &RunConfig) -> FrameInput {
        let rig = default_rig(c.scene.image_width, c.scene.image_height);
        let scn = generate(Family::Merge, 3, &rig).unwrap();
        FrameInput {
            grid: render_features(&scn, 1.0, c.model.channels, c.model.feature_levels).unwrap(),
            cams: rig.iter().map(|r| r.pinhole()).collect(),
            cond: Conditioning {
                target: [25.0, 0.0],
                command: Command::Straight,
                speed: 5.0,
            },
        }
    }

    #[test]
    fn planning_anchors_start_as_straight_lines() {
        let m = Model::new(&tiny_config()).unwrap();
        let a = m.store.get(m.plan_anchors[0]);
        assert_eq!(a.shape(), &[3, 12]);
        assert!(a.data().iter().skip(1).step_by(2).all(|&y| y == 0.0));
        assert!(a.at2(2, 10) > a.at2(0, 10));
    }

    #[test]
    fn inference_rotates_memory_and_is_deterministic() {
        let c = tiny_config();
        let m = Model::new(&c).unwrap();
        let x = input(&c);
        let mut bank = m.memory_bank().unwrap();
        let a = m.infer(&x, &mut bank, true).unwrap();
        assert_eq!(bank.active, 1);
        assert!(bank.slots[0].is_some());
        let mut bank2 = m.memory_bank().unwrap();
        let b = m.infer(&x, &mut bank2, true).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.output.waypoints.len(), 3);
        assert_eq!(a.output.style_scores.as_ref().unwrap()[0].len(), 3);
    }

    #[test]
    fn anchors_follow_clustered_futures() {
        let mut m = Model::new(&tiny_config()).unwrap();
        let mut futures = Vec::new();
        for k in 0..30 {
            let v = [2.0, 6.0, 9.0][k % 3];
            let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
            let pts = ts.iter().map(|t| [v * t, 0.1 * v * t]).collect();
            futures.push(Trajectory::new(pts, ts).unwrap());
        }
        m.fit_anchors(&futures, &[]).unwrap();
        let a = m.store.get(m.plan_anchors[0]);
        let mut ends: Vec<f64> = (0..3).map(|i| a.at2(i, 10)).collect();
        ends.sort_by(f64::total_cmp);
        for (e, v) in ends.iter().zip([2.0, 6.0, 9.0]) {
            assert!((e - 3.0 * v).abs() < 1e-9, "{ends:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let c = tiny_config();
        let m = Model::new(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load_matching(&p, &c).unwrap();
        for ((_, n, a), (_, _, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.tensor, b.tensor, "{n}");
        }
        let mut other = c.clone();
        other.model.modalities = 4;
        assert!(matches!(Model::load_matching(&p, &other), Err(Error::Load(_))));
    }
}

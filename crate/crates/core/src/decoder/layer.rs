use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::attention::{GeoAttention, TauMode};
use crate::decoder::deformable::{project_reference_vars, DeformBlock};
use crate::decoder::distance::distance_vars;
use crate::decoder::memory::MemorySlot;
use crate::decoder::queries::{QueryVars, AGENT_ANCHOR_DIM};
use crate::error::{Error, Result};
use crate::numerics::nn::LAYER_NORM_EPS;
use crate::numerics::{Activation, Bound, LayerNorm, Linear, Mlp, ParamStore, Pinhole, Tape, Tensor, Var};
use crate::trajectory::Point2;

/// Meters per unit of anchor coordinates fed to the position embeddings.
const POS_SCALE_M: f64 = 10.0;

/// Static sizes of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderShape {
    pub channels: usize,
    pub layers: usize,
    pub map_points: usize,
    pub modalities: usize,
    /// Waypoint count `T_j` of each granularity, in layout order.
    pub plan_horizons: Vec<usize>,
    pub plan_ref_points: usize,
    pub heights: Vec<f64>,
    pub samples: usize,
    pub levels: usize,
    pub offset_range_px: f64,
    pub tau_hidden: usize,
    pub tau_bias_init: f64,
    pub ffn_hidden: usize,
    pub agent_refine_m: f64,
    pub map_refine_m: f64,
    pub plan_refine_m: f64,
}

impl DecoderShape {
    pub fn from_config(m: &ModelConfig, plan_horizons: Vec<usize>) -> Self {
        Self {
            channels: m.channels,
            layers: m.layers,
            map_points: m.map_points,
            modalities: m.modalities,
            plan_horizons,
            plan_ref_points: m.plan_ref_points,
            heights: m.ref_heights.clone(),
            samples: m.samples_per_ref,
            levels: m.feature_levels,
            offset_range_px: m.offset_range_px,
            tau_hidden: m.tau_hidden,
            tau_bias_init: m.tau_bias_init,
            ffn_hidden: m.ffn_hidden,
            agent_refine_m: m.agent_refine_m,
            map_refine_m: m.map_refine_m,
            plan_refine_m: m.plan_refine_m,
        }
    }

    pub fn granularities(&self) -> usize {
        self.plan_horizons.len()
    }
}

/// Per-task cross-attention against remembered queries, plus planning
/// queries attending to remembered perception queries.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub agent: GeoAttention,
    pub map: GeoAttention,
    pub plan: GeoAttention,
    pub plan_perception: GeoAttention,
}

impl TemporalBlock {
    fn new(store: &mut ParamStore, name: &str, s: &DecoderShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut mk = |n: &str| {
            GeoAttention::new(store, &format!("{name}.{n}"), s.channels, s.tau_hidden, s.tau_bias_init, true, rng)
        };
        Ok(Self {
            agent: mk("agent")?,
            map: mk("map")?,
            plan: mk("plan")?,
            plan_perception: mk("plan_perception")?,
        })
    }

    /// Current queries attend to the stored ones; an empty memory leaves
    /// the queries untouched and a task with nothing stored is skipped.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        q: &QueryVars,
        memory: Option<&MemorySlot>,
    ) -> Result<QueryVars> {
        let Some(mem) = memory else {
            return Ok(q.clone());
        };
        let c = tape.shape(q.agent)[1];
        if mem.channels() != c || mem.map.features.cols() != c || mem.plan.features.cols() != c {
            return Err(Error::State(format!(
                "memory holds {}-channel queries, decoder uses {c}",
                mem.channels()
            )));
        }
        let mut out = q.clone();
        let cross = |tape: &mut Tape, blk: &GeoAttention, x: Var, kv: &Tensor| -> Result<Var> {
            if kv.rows() == 0 {
                return Ok(x);
            }
            let m = tape.constant(kv.clone());
            blk.forward(tape, b, x, Some(m), None, TauMode::Learned)
        };
        out.agent = cross(tape, &self.agent, q.agent, &mem.agent.features)?;
        out.map = cross(tape, &self.map, q.map, &mem.map.features)?;
        out.plan = cross(tape, &self.plan, q.plan, &mem.plan.features)?;
        let (ka, km) = (mem.agent.features.rows(), mem.map.features.rows());
        let mut perception = Tensor::zeros(&[ka + km, c]);
        perception.data_mut()[..ka * c].copy_from_slice(mem.agent.features.data());
        perception.data_mut()[ka * c..].copy_from_slice(mem.map.features.data());
        out.plan = cross(tape, &self.plan_perception, out.plan, &perception)?;
        Ok(out)
    }
}

/// Per-task geometric self-attention followed by one unified attention over
/// all queries.
#[derive(Clone, Debug)]
pub struct CollabBlock {
    pub agent: GeoAttention,
    pub map: GeoAttention,
    pub plan: GeoAttention,
    pub unified: GeoAttention,
}

impl CollabBlock {
    fn new(store: &mut ParamStore, name: &str, s: &DecoderShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut mk = |n: &str| {
            GeoAttention::new(store, &format!("{name}.{n}"), s.channels, s.tau_hidden, s.tau_bias_init, false, rng)
        };
        Ok(Self {
            agent: mk("agent")?,
            map: mk("map")?,
            plan: mk("plan")?,
            unified: mk("unified")?,
        })
    }

    /// Planning self-attention has no distance term.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, q: &QueryVars, mode: TauMode) -> Result<QueryVars> {
        let (na, nm, np) = (
            tape.shape(q.agent)[0],
            tape.shape(q.map)[0],
            tape.shape(q.plan)[0],
        );
        let d = distance_vars(tape, q.agent_anchors, q.map_anchors, np)?;
        let mut out = q.clone();
        out.agent = self.agent.forward(tape, b, q.agent, None, Some(d.agent_agent), mode)?;
        out.map = self.map.forward(tape, b, q.map, None, Some(d.map_map), mode)?;
        out.plan = self.plan.forward(tape, b, q.plan, None, None, mode)?;

        let all = tape.concat_rows(&[out.agent, out.map, out.plan])?;
        let all = self.unified.forward(tape, b, all, None, Some(d.unified), mode)?;
        out.agent = tape.slice_rows(all, 0, na)?;
        out.map = tape.slice_rows(all, na, nm)?;
        out.plan = tape.slice_rows(all, na + nm, np)?;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[c, hidden, c], Activation::Relu, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, b, x)?;
        let h = self.mlp.forward(tape, b, h)?;
        tape.add(x, h)
    }
}

/// Indices of the evenly spaced waypoints used as deformable reference
/// points of a `t`-waypoint anchor.
pub fn plan_reference_indices(t: usize, count: usize) -> Vec<usize> {
    if count == 1 {
        return vec![t / 2];
    }
    (0..count)
        .map(|r| ((r * (t - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

pub fn plan_reference_points(anchor: &[Point2], count: usize) -> Vec<Point2> {
    plan_reference_indices(anchor.len(), count)
        .into_iter()
        .map(|i| anchor[i])
        .collect()
}

/// `[K, 2]` ground points to `[K·H, 3]`, point-major.
fn lift_var(tape: &mut Tape, pts: Var, heights: &[f64]) -> Result<Var> {
    let k = tape.shape(pts)[0];
    let h = heights.len();
    let idx: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat(i).take(h)).collect();
    let g = tape.gather_rows(pts, &idx)?;
    let z: Vec<f64> = (0..k).flat_map(|_| heights.iter().copied()).collect();
    let z = tape.constant(Tensor::new(vec![k * h, 1], z)?);
    tape.concat_cols(g, z)
}

/// Reference waypoints of every planning query, modality-major `[N_p, 2R]`.
fn plan_ref_var(tape: &mut Tape, q: &QueryVars, s: &DecoderShape) -> Result<Var> {
    let (g, m) = (s.granularities(), s.modalities);
    let mut blocks = Vec::with_capacity(g);
    for (j, &t) in s.plan_horizons.iter().enumerate() {
        let mut acc: Option<Var> = None;
        for i in plan_reference_indices(t, s.plan_ref_points) {
            let c = tape.slice_cols(q.plan_anchors[j], 2 * i, 2)?;
            acc = Some(match acc {
                Some(a) => tape.concat_cols(a, c)?,
                None => c,
            });
        }
        blocks.push(acc.expect("at least one reference point"));
    }
    let stacked = tape.concat_rows(&blocks)?;
    let order: Vec<usize> = (0..m * g).map(|row| (row % g) * m + row / g).collect();
    tape.gather_rows(stacked, &order)
}

/// One decoder layer: temporal, collaborative, deformable, feed-forward,
/// then anchor refinement.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub agent_pos: Mlp,
    pub map_pos: Mlp,
    pub plan_pos: Mlp,
    pub temporal: TemporalBlock,
    pub collab: CollabBlock,
    pub deform_agent: DeformBlock,
    pub deform_map: DeformBlock,
    pub deform_plan: DeformBlock,
    pub ffn_agent: Ffn,
    pub ffn_map: Ffn,
    pub ffn_plan: Ffn,
    pub refine_agent: Linear,
    pub refine_map: Linear,
    pub refine_plan: Vec<Linear>,
}

/// Inputs shared by every layer of one forward pass.
pub struct DecoderInput<'a> {
    /// Per camera, per level feature maps `[H_l, W_l, C]` on the tape.
    pub maps: Vec<Vec<Var>>,
    pub cams: Vec<Pinhole>,
    pub memory: Option<&'a MemorySlot>,
    pub tau: TauMode,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, s: &DecoderShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = s.channels;
        let h = s.heights.len();
        let pos = |store: &mut ParamStore, n: &str, input: usize, rng: &mut ChaCha8Rng| {
            Mlp::new(store, &format!("{name}.{n}"), &[input, c, c], Activation::Relu, rng)
        };
        let deform = |store: &mut ParamStore, n: &str, refs: usize, rng: &mut ChaCha8Rng| {
            DeformBlock::new(store, &format!("{name}.{n}"), c, refs, s.samples, s.levels, s.offset_range_px, rng)
        };
        Ok(Self {
            agent_pos: pos(store, "agent_pos", AGENT_ANCHOR_DIM, rng)?,
            map_pos: pos(store, "map_pos", 2 * s.map_points, rng)?,
            plan_pos: pos(store, "plan_pos", 2 * s.plan_ref_points, rng)?,
            temporal: TemporalBlock::new(store, &format!("{name}.temporal"), s, rng)?,
            collab: CollabBlock::new(store, &format!("{name}.collab"), s, rng)?,
            deform_agent: deform(store, "deform_agent", h, rng)?,
            deform_map: deform(store, "deform_map", s.map_points * h, rng)?,
            deform_plan: deform(store, "deform_plan", s.plan_ref_points * h, rng)?,
            ffn_agent: Ffn::new(store, &format!("{name}.ffn_agent"), c, s.ffn_hidden, rng)?,
            ffn_map: Ffn::new(store, &format!("{name}.ffn_map"), c, s.ffn_hidden, rng)?,
            ffn_plan: Ffn::new(store, &format!("{name}.ffn_plan"), c, s.ffn_hidden, rng)?,
            refine_agent: Linear::zeroed(store, &format!("{name}.refine_agent"), c, AGENT_ANCHOR_DIM)?,
            refine_map: Linear::zeroed(store, &format!("{name}.refine_map"), c, 2 * s.map_points)?,
            refine_plan: s
                .plan_horizons
                .iter()
                .enumerate()
                .map(|(j, &t)| Linear::zeroed(store, &format!("{name}.refine_plan.{j}"), c, 2 * t))
                .collect::<Result<_>>()?,
        })
    }

    /// Adds anchor embeddings to the features.
    fn embed_anchors(&self, tape: &mut Tape, b: &Bound, q: &QueryVars, plan_refs: Var) -> Result<QueryVars> {
        let mut out = q.clone();
        let k = 1.0 / POS_SCALE_M;
        let agent_scale = tape.constant(Tensor::new(vec![AGENT_ANCHOR_DIM], vec![k, k, k, k, 1.0])?);
        let agent = tape.mul_row(q.agent_anchors, agent_scale)?;
        let map = tape.scale(q.map_anchors, k);
        let plan = tape.scale(plan_refs, k);
        for (x, pos, input) in [
            (&mut out.agent, &self.agent_pos, agent),
            (&mut out.map, &self.map_pos, map),
            (&mut out.plan, &self.plan_pos, plan),
        ] {
            let e = pos.forward(tape, b, input)?;
            *x = tape.add(*x, e)?;
        }
        Ok(out)
    }

    fn deform(
        &self,
        tape: &mut Tape,
        b: &Bound,
        q: &QueryVars,
        plan_refs: Var,
        s: &DecoderShape,
        input: &DecoderInput,
    ) -> Result<QueryVars> {
        let mut out = q.clone();
        let centers = tape.slice_cols(q.agent_anchors, 0, 2)?;
        let nm = tape.shape(q.map_anchors)[0];
        let verts = tape.reshape(q.map_anchors, &[nm * s.map_points, 2])?;
        let np = tape.shape(plan_refs)[0];
        let waypoints = tape.reshape(plan_refs, &[np * s.plan_ref_points, 2])?;
        for (x, blk, pts) in [
            (&mut out.agent, &self.deform_agent, centers),
            (&mut out.map, &self.deform_map, verts),
            (&mut out.plan, &self.deform_plan, waypoints),
        ] {
            let p3 = lift_var(tape, pts, &s.heights)?;
            let base = project_reference_vars(tape, p3, &input.cams, s.levels)?;
            *x = blk.forward(tape, b, *x, &input.maps, &base)?;
        }
        Ok(out)
    }

    fn refine(&self, tape: &mut Tape, b: &Bound, q: &QueryVars, s: &DecoderShape) -> Result<QueryVars> {
        let mut out = q.clone();
        let bounded = |tape: &mut Tape, head: &Linear, x: Var, scale: f64| -> Result<Var> {
            let xn = tape.layer_norm(x, LAYER_NORM_EPS);
            let d = head.forward(tape, b, xn)?;
            let d = tape.tanh(d);
            Ok(tape.scale(d, scale))
        };
        let d = bounded(tape, &self.refine_agent, q.agent, s.agent_refine_m)?;
        out.agent_anchors = tape.add(q.agent_anchors, d)?;
        let d = bounded(tape, &self.refine_map, q.map, s.map_refine_m)?;
        out.map_anchors = tape.add(q.map_anchors, d)?;
        let g = s.granularities();
        for (j, head) in self.refine_plan.iter().enumerate() {
            let rows: Vec<usize> = (0..s.modalities).map(|i| i * g + j).collect();
            let xj = tape.gather_rows(q.plan, &rows)?;
            let d = bounded(tape, head, xj, s.plan_refine_m)?;
            out.plan_anchors[j] = tape.add(q.plan_anchors[j], d)?;
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        q: &QueryVars,
        s: &DecoderShape,
        input: &DecoderInput,
    ) -> Result<QueryVars> {
        let plan_refs = plan_ref_var(tape, q, s)?;
        let q = self.embed_anchors(tape, b, q, plan_refs)?;
        let q = self.temporal.forward(tape, b, &q, input.memory)?;
        let q = self.collab.forward(tape, b, &q, input.tau)?;
        let mut q = self.deform(tape, b, &q, plan_refs, s, input)?;
        q.agent = self.ffn_agent.forward(tape, b, q.agent)?;
        q.map = self.ffn_map.forward(tape, b, q.map)?;
        q.plan = self.ffn_plan.forward(tape, b, q.plan)?;
        self.refine(tape, b, &q, s)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub shape: DecoderShape,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, shape: DecoderShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        if shape.layers == 0 || shape.plan_horizons.is_empty() || shape.heights.is_empty() {
            return Err(Error::Config("decoder needs layers, granularities and heights".into()));
        }
        let layers = (0..shape.layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.layer{l}"), &shape, rng))
            .collect::<Result<_>>()?;
        Ok(Self { shape, layers })
    }

    /// Runs every layer and returns the queries after each one.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, q: QueryVars, input: &DecoderInput) -> Result<Vec<QueryVars>> {
        self.check(tape, &q, input)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = q;
        for layer in &self.layers {
            cur = layer.forward(tape, b, &cur, &self.shape, input)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn check(&self, tape: &Tape, q: &QueryVars, input: &DecoderInput) -> Result<()> {
        let s = &self.shape;
        let c = s.channels;
        for v in [q.agent, q.map, q.plan] {
            if tape.shape(v)[1] != c {
                return Err(Error::dim("decoder", tape.shape(v), &[c]));
            }
        }
        if tape.shape(q.plan)[0] != s.modalities * s.granularities() {
            return Err(Error::Layout("planning queries do not match the layout".into()));
        }
        if tape.shape(q.map_anchors)[1] != 2 * s.map_points {
            return Err(Error::dim("decoder", tape.shape(q.map_anchors), &[2 * s.map_points]));
        }
        for (&a, &t) in q.plan_anchors.iter().zip(&s.plan_horizons) {
            if tape.shape(a) != [s.modalities, 2 * t] {
                return Err(Error::dim("decoder", tape.shape(a), &[s.modalities, 2 * t]));
            }
        }
        if input.maps.len() != input.cams.len() || input.maps.iter().any(|m| m.len() != s.levels) {
            return Err(Error::Layout("feature maps do not match the camera rig".into()));
        }
        for m in input.maps.iter().flatten() {
            if tape.shape(*m).len() != 3 || tape.shape(*m)[2] != c {
                return Err(Error::dim("decoder", tape.shape(*m), &[c]));
            }
        }
        Ok(())
    }
}

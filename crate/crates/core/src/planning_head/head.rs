use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, Mlp, ParamId, ParamStore, Tape, Var};
use crate::planning_head::layout::GranularityLayout;
use crate::scene::Command;
use crate::trajectory::Point2;

/// Target point (2), command one-hot (6) and ego speed (1).
pub const COND_DIM: usize = 9;

/// Route conditioning shared by every planning query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    /// Route target in the ego frame (m).
    pub target: Point2,
    pub command: Command,
    pub speed: f64,
}

impl Conditioning {
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(COND_DIM);
        let r = (self.target[0].hypot(self.target[1]) / 20.0).max(1.0);
        f.push(self.target[0] / (20.0 * r));
        f.push(self.target[1] / (20.0 * r));
        f.extend(self.command.one_hot());
        f.push(self.speed / 5.0);
        f
    }
}

/// Planning outputs on the tape for one sample.
#[derive(Clone, Debug)]
pub struct PlanningVars {
    /// Per granularity `[N_m, 2·T_j]`, absolute ego-frame waypoints.
    pub waypoints: Vec<Var>,
    /// `[N_m, 1]` modality logits.
    pub modality: Var,
    /// `[N_m, n_d]` driving-style logits, absent while the head is off.
    pub style: Option<Var>,
    /// `[N_m, C]`.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct PlanningHead {
    pub layout: GranularityLayout,
    pub channels: usize,
    pub modality_emb: ParamId,
    pub granularity_emb: ParamId,
    pub cond: Mlp,
    pub reg: Vec<Mlp>,
    pub score: Mlp,
    pub style: Option<Mlp>,
}

impl PlanningHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: GranularityLayout,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = channels;
        let g = layout.num_granularities();
        let modality_emb = store.uniform(&format!("{name}.modality_emb"), &[layout.modalities, c], 1, rng)?;
        let granularity_emb = store.uniform(&format!("{name}.granularity_emb"), &[g, c], 1, rng)?;
        let cond = Mlp::new(store, &format!("{name}.cond"), &[COND_DIM, c, c], Activation::Relu, rng)?;
        let reg = layout
            .specs
            .iter()
            .enumerate()
            .map(|(j, s)| {
                Mlp::zero_last(store, &format!("{name}.reg.{j}"), &[c, c, 2 * s.horizon], Activation::Relu, rng)
            })
            .collect::<Result<_>>()?;
        let score = Mlp::new(store, &format!("{name}.score"), &[c, c, 1], Activation::Relu, rng)?;
        let style = if layout.n_d > 0 {
            Some(Mlp::zero_last(store, &format!("{name}.style"), &[c, c, layout.n_d], Activation::Relu, rng)?)
        } else {
            None
        };
        Ok(Self {
            layout,
            channels,
            modality_emb,
            granularity_emb,
            cond,
            reg,
            score,
            style,
        })
    }

    /// `N_p = N_m·N_g` initial query features: modality embedding plus
    /// granularity embedding plus the embedded conditioning.
    pub fn build_queries(&self, tape: &mut Tape, b: &Bound, cond: &Conditioning) -> Result<Var> {
        let (m, g) = (self.layout.modalities, self.layout.num_granularities());
        let mi: Vec<usize> = (0..m * g).map(|r| r / g).collect();
        let gi: Vec<usize> = (0..m * g).map(|r| r % g).collect();
        let me = tape.gather_rows(b.var(self.modality_emb), &mi)?;
        let ge = tape.gather_rows(b.var(self.granularity_emb), &gi)?;
        let q = tape.add(me, ge)?;
        let cv = tape.constant(crate::numerics::Tensor::new(vec![1, COND_DIM], cond.features())?);
        let ce = self.cond.forward(tape, b, cv)?;
        tape.add_row(q, ce)
    }

    /// `W^{i,j} = anchor^{i,j} + MLP_j(fuse(Q)^i)`, modality scores and,
    /// when `style_on`, driving-style scores.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        plan: Var,
        anchors: &[Var],
        style_on: bool,
    ) -> Result<PlanningVars> {
        if anchors.len() != self.reg.len() {
            return Err(Error::Layout(format!(
                "{} anchor sets for {} granularities",
                anchors.len(),
                self.reg.len()
            )));
        }
        let fused = fuse(tape, plan, &self.layout)?;
        let waypoints = regress(tape, b, &self.reg, fused, anchors)?;
        let modality = self.score.forward(tape, b, fused)?;
        let style = match (&self.style, style_on) {
            (Some(h), true) => Some(h.forward(tape, b, fused)?),
            _ => None,
        };
        Ok(PlanningVars {
            waypoints,
            modality,
            style,
            fused,
        })
    }
}

/// `Q_fuse^i = Σ_j Q_p^{ij}` over the `N_g` rows of each modality.
pub fn fuse(tape: &mut Tape, plan: Var, layout: &GranularityLayout) -> Result<Var> {
    let rows = tape.shape(plan)[0];
    if rows != layout.num_queries() {
        return Err(Error::Layout(format!(
            "{rows} planning queries for {} modalities x {} granularities",
            layout.modalities,
            layout.num_granularities()
        )));
    }
    tape.group_sum_rows(plan, layout.num_granularities())
}

/// Per-granularity heads applied to every modality's fused feature.
pub fn regress(tape: &mut Tape, b: &Bound, heads: &[Mlp], fused: Var, anchors: &[Var]) -> Result<Vec<Var>> {
    heads
        .iter()
        .zip(anchors)
        .map(|(h, &a)| {
            let d = h.forward(tape, b, fused)?;
            tape.add(a, d)
        })
        .collect()
}

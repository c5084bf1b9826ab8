//! Planning, perception and auxiliary losses.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::planning_head::{GranularityLayout, PlanningVars};
use crate::scene::frames::MOTION_STEPS;
use crate::scene::{wrap_angle, AgentTruth};
use crate::training::hungarian::hungarian;
use crate::training::matching::{select_style_granularity, MatchResult};
use crate::trajectory::{dist, GranularityKind, GroundTruth, Point2, SpeedBins};

/// Scalar loss values of one sample or the mean over many.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub det: f64,
    pub motion: f64,
    pub map: f64,
    /// Weighted planning loss.
    pub plan: f64,
    /// Unweighted regression loss per granularity; zero where masked.
    pub plan_reg: Vec<f64>,
    pub plan_cls: f64,
    pub plan_style: f64,
    pub aux: f64,
}

impl LossReport {
    /// `plan_reg·Σreg + plan_cls·cls + plan_style·style`.
    pub fn plan_from_terms(&self, w: &LossWeights) -> f64 {
        w.plan_reg * self.plan_reg.iter().sum::<f64>() + w.plan_cls * self.plan_cls + w.plan_style * self.plan_style
    }

    pub fn total_from_terms(&self, w: &LossWeights) -> f64 {
        w.det * self.det + w.motion * self.motion + w.map * self.map + self.plan + w.aux * self.aux
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let g = reports.first().map_or(0, |r| r.plan_reg.len());
        let mut out = LossReport {
            plan_reg: vec![0.0; g],
            ..Default::default()
        };
        for r in reports {
            out.total += r.total / n;
            out.det += r.det / n;
            out.motion += r.motion / n;
            out.map += r.map / n;
            out.plan += r.plan / n;
            out.plan_cls += r.plan_cls / n;
            out.plan_style += r.plan_style / n;
            out.aux += r.aux / n;
            for (o, v) in out.plan_reg.iter_mut().zip(&r.plan_reg) {
                *o += v / n;
            }
        }
        out
    }
}

fn finite(tape: &Tape, v: Var, term: &str) -> Result<f64> {
    let x = tape.value(v).item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Training {
            term: term.into(),
            msg: format!("loss is {x}"),
        })
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Driving-style bin per frequency group from the unpadded temporal ground
/// truth speeds.
pub fn style_targets(gt: &GroundTruth, layout: &GranularityLayout, bins: &SpeedBins) -> Result<Vec<usize>> {
    let speeds: Vec<Vec<f64>> = (0..layout.n_t)
        .map(|f| {
            gt.step_speeds[f]
                .iter()
                .zip(&gt.sets[f].padded)
                .filter(|(_, &p)| !p)
                .map(|(&v, _)| v)
                .collect()
        })
        .collect();
    select_style_granularity(&speeds, bins)
}

/// Whether granularity `j` receives regression loss given the selected
/// style bin of each frequency group.
pub fn is_supervised(layout: &GranularityLayout, j: usize, style_bins: &[usize]) -> bool {
    match layout.specs[j].kind {
        GranularityKind::DrivingStyle => {
            let k = j - layout.n_t - layout.n_s;
            let (bin, f) = (k / layout.n_t, k % layout.n_t);
            style_bins.get(f) == Some(&bin)
        }
        _ => true,
    }
}

/// Planning loss terms on the tape.
#[derive(Clone, Debug)]
pub struct PlanTerms {
    pub total: Var,
    /// Per granularity, `None` where the granularity is masked.
    pub reg: Vec<Option<Var>>,
    pub cls: Var,
    pub style: Option<Var>,
}

/// Smooth-L1 on the matched modality of every supervised granularity,
/// modality cross-entropy against the matched index and, when the style
/// head is on, style cross-entropy against the reference frequency's bin.
#[allow(clippy::too_many_arguments)]
pub fn plan_loss(
    tape: &mut Tape,
    vars: &PlanningVars,
    layout: &GranularityLayout,
    gt: &GroundTruth,
    matched: &MatchResult,
    style_bins: &[usize],
    w: &LossWeights,
    beta: f64,
) -> Result<PlanTerms> {
    let nm = layout.modalities;
    let mut reg = Vec::with_capacity(layout.num_granularities());
    let mut sum = zero(tape);
    for (j, &wv) in vars.waypoints.iter().enumerate() {
        if !is_supervised(layout, j, style_bins) {
            reg.push(None);
            continue;
        }
        let set = &gt.sets[j];
        let t = set.len();
        let i = matched.per_granularity[j];
        let mut target = vec![0.0; nm * 2 * t];
        let mut mask = vec![0.0; nm * 2 * t];
        for (k, (p, &pad)) in set.waypoints.iter().zip(&set.padded).enumerate() {
            let o = i * 2 * t + 2 * k;
            target[o] = p[0];
            target[o + 1] = p[1];
            if !pad {
                mask[o] = 1.0;
                mask[o + 1] = 1.0;
            }
        }
        let l = tape.smooth_l1(wv, &target, &mask, beta)?;
        finite(tape, l, &format!("plan_reg.{}", set.spec.id()))?;
        sum = tape.add(sum, l)?;
        reg.push(Some(l));
    }
    let logits = tape.reshape(vars.modality, &[1, nm])?;
    let cls = tape.cross_entropy(logits, &[matched.ref_index])?;
    finite(tape, cls, "plan_cls")?;
    let style = match vars.style {
        Some(s) => {
            let row = tape.gather_rows(s, &[matched.ref_index])?;
            let f = layout.reference()?;
            let l = tape.cross_entropy(row, &[style_bins[f]])?;
            finite(tape, l, "plan_style")?;
            Some(l)
        }
        None => None,
    };
    let a = tape.scale(sum, w.plan_reg);
    let b = tape.scale(cls, w.plan_cls);
    let mut total = tape.add(a, b)?;
    if let Some(s) = style {
        let c = tape.scale(s, w.plan_style);
        total = tape.add(total, c)?;
    }
    Ok(PlanTerms { total, reg, cls, style })
}

/// Masked mean squared error against a constant target; 0 for an empty
/// mask.
fn masked_mse(tape: &mut Tape, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(zero(tape));
    }
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(Tensor::new(shape.clone(), target.to_vec())?);
    let m = tape.constant(Tensor::new(shape, mask.to_vec())?);
    let d = tape.sub(pred, t)?;
    let d = tape.mul(d, m)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / count))
}

fn box_cost(p: &[f64], g: &[f64; 5]) -> f64 {
    (p[0] - g[0]).abs() + (p[1] - g[1]).abs() + 0.5 * ((p[2] - g[2]).abs() + (p[3] - g[3]).abs())
}

/// Detection (box smooth-L1 plus existence BCE) and motion (mean squared
/// displacement error) losses over Hungarian-matched agents.
pub fn det_motion_loss(
    tape: &mut Tape,
    boxes: Var,
    cls: Var,
    motion: Var,
    agents: &[AgentTruth],
    beta: f64,
) -> Result<(Var, Var)> {
    let pb = tape.value(boxes).clone();
    let (n, d) = (pb.rows(), pb.cols());
    let cost: Vec<Vec<f64>> = agents
        .iter()
        .map(|a| (0..n).map(|p| box_cost(pb.row(p), &a.bbox)).collect())
        .collect();
    let assign = hungarian(&cost);
    let mut target = vec![0.0; n * d];
    let mut mask = vec![0.0; n * d];
    let mut exists = vec![0.0; n];
    let m = 2 * MOTION_STEPS;
    let mut mtarget = vec![0.0; n * m];
    let mut mmask = vec![0.0; n * m];
    for (a, p) in agents.iter().zip(&assign) {
        let Some(p) = *p else { continue };
        let mut g = a.bbox;
        g[4] = pb.at2(p, 4) + wrap_angle(g[4] - pb.at2(p, 4));
        target[p * d..p * d + 5].copy_from_slice(&g);
        mask[p * d..p * d + 5].fill(1.0);
        exists[p] = 1.0;
        for (k, f) in a.future.iter().enumerate() {
            mtarget[p * m + 2 * k] = f[0];
            mtarget[p * m + 2 * k + 1] = f[1];
        }
        mmask[p * m..(p + 1) * m].fill(1.0);
    }
    let reg = tape.smooth_l1(boxes, &target, &mask, beta)?;
    let bce = tape.bce_with_logits(cls, &exists)?;
    let det = tape.add(reg, bce)?;
    finite(tape, det, "det")?;
    let mot = masked_mse(tape, motion, &mtarget, &mmask)?;
    finite(tape, mot, "motion")?;
    Ok((det, mot))
}

fn chamfer(a: &[Point2], b: &[Point2]) -> f64 {
    let one = |x: &[Point2], y: &[Point2]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

fn ordered(a: &[Point2], b: &[Point2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| dist(*p, *q)).sum::<f64>() / a.len() as f64
}

/// Map loss: polylines matched by Chamfer distance, then vertex smooth-L1
/// against the matched ground truth in whichever direction lies closer,
/// plus existence BCE.
pub fn map_loss(tape: &mut Tape, lines: Var, cls: Var, gt: &[Vec<Point2>], beta: f64) -> Result<Var> {
    let pl = tape.value(lines).clone();
    let (n, d) = (pl.rows(), pl.cols());
    let pred: Vec<Vec<Point2>> = (0..n).map(|r| pl.row(r).chunks(2).map(|c| [c[0], c[1]]).collect()).collect();
    let gt: Vec<&Vec<Point2>> = gt.iter().filter(|g| 2 * g.len() == d).collect();
    let cost: Vec<Vec<f64>> = gt.iter().map(|g| pred.iter().map(|p| chamfer(p, g)).collect()).collect();
    let assign = hungarian(&cost);
    let mut target = vec![0.0; n * d];
    let mut mask = vec![0.0; n * d];
    let mut exists = vec![0.0; n];
    for (g, p) in gt.iter().zip(&assign) {
        let Some(p) = *p else { continue };
        let rev: Vec<Point2> = g.iter().rev().copied().collect();
        let best = if ordered(&pred[p], &rev) < ordered(&pred[p], g) { &rev } else { *g };
        let flat: Vec<f64> = best.iter().flatten().copied().collect();
        target[p * d..(p + 1) * d].copy_from_slice(&flat);
        mask[p * d..(p + 1) * d].fill(1.0);
        exists[p] = 1.0;
    }
    let reg = tape.smooth_l1(lines, &target, &mask, beta)?;
    let bce = tape.bce_with_logits(cls, &exists)?;
    let l = tape.add(reg, bce)?;
    finite(tape, l, "map")?;
    Ok(l)
}

/// Ego-status regression: speed / 5 and yaw rate.
pub fn aux_loss(tape: &mut Tape, ego: Var, speed: f64, yaw_rate: f64, beta: f64) -> Result<Var> {
    let l = tape.smooth_l1(ego, &[speed / 5.0, yaw_rate], &[1.0, 1.0], beta)?;
    finite(tape, l, "aux")?;
    Ok(l)
}

/// Every loss term on the tape.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub det: Var,
    pub motion: Var,
    pub map: Var,
    pub plan: PlanTerms,
    pub aux: Var,
}

/// Weighted sum of the task losses.
pub fn total_loss(
    tape: &mut Tape,
    plan: PlanTerms,
    det: Var,
    motion: Var,
    map: Var,
    aux: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    let mut total = plan.total;
    for (v, k) in [(det, w.det), (motion, w.motion), (map, w.map), (aux, w.aux)] {
        let s = tape.scale(v, k);
        total = tape.add(total, s)?;
    }
    finite(tape, total, "total")?;
    Ok(LossVars {
        total,
        det,
        motion,
        map,
        plan,
        aux,
    })
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            total: v(self.total),
            det: v(self.det),
            motion: v(self.motion),
            map: v(self.map),
            plan: v(self.plan.total),
            plan_reg: self.plan.reg.iter().map(|r| r.map_or(0.0, v)).collect(),
            plan_cls: v(self.plan.cls),
            plan_style: self.plan.style.map_or(0.0, v),
            aux: v(self.aux),
        }
    }
}

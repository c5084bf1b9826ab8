//! Two-phase training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::MemorySlot;
use crate::error::{Error, Result};
use crate::model::{Model, ModelVars};
use crate::numerics::{adam_step, cosine_lr, AdamConfig, AdamState, Bound, Tape, Tensor};
use crate::planning_head::PlanningOutput;
use crate::scene::Scenario;
use crate::simulator::open_loop_l2;
use crate::training::data::{build_samples, Sample};
use crate::training::loss::{aux_loss, det_motion_loss, map_loss, plan_loss, total_loss, LossReport, LossVars};
use crate::training::matching::{align_match, MatchResult};
use crate::trajectory::Point2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// 1 with the style head off, 2 with it on.
    pub phase: u8,
    pub lr: f64,
    pub loss: LossReport,
    pub open_loop_l2: f64,
    /// Samples skipped because the reference ground truth was fully padded.
    pub skipped: usize,
}

pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Memory slot for a sample: the top-k queries of its previous frame. It
/// enters the loss as a constant.
pub fn sample_memory(model: &Model, sample: &Sample, style_on: bool) -> Result<Option<MemorySlot>> {
    let mut bank = model.memory_bank_with(1)?;
    model.infer(&sample.prev, &mut bank, style_on)?;
    Ok(bank.read().cloned())
}

/// Loss of one sample on a prepared tape; `None` when the sample has no
/// usable reference ground truth.
pub fn sample_loss(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    sample: &Sample,
    style_on: bool,
) -> Result<Option<(ModelVars, MatchResult, LossVars)>> {
    let memory = sample_memory(model, sample, style_on)?;
    loss_with_memory(model, tape, b, sample, memory.as_ref(), style_on)
}

pub fn loss_with_memory(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    sample: &Sample,
    memory: Option<&MemorySlot>,
    style_on: bool,
) -> Result<Option<(ModelVars, MatchResult, LossVars)>> {
    let vars = model.forward(tape, b, &sample.input, memory, style_on)?;
    let layout = &model.layout;
    let r = layout.reference()?;
    let pred: Vec<Vec<Point2>> = {
        let t = tape.value(vars.plan.waypoints[r]);
        (0..layout.modalities)
            .map(|i| t.row(i).chunks(2).map(|c| [c[0], c[1]]).collect())
            .collect()
    };
    let Some(matched) = align_match(&pred, &sample.gt.sets[r], layout.num_granularities()) else {
        log::warn!(
            "{} frame {}: reference ground truth fully padded, sample skipped",
            sample.scenario,
            sample.frame
        );
        return Ok(None);
    };
    let tc = &model.config.training;
    let w = &tc.weights;
    let beta = tc.smooth_l1_beta;
    let plan = plan_loss(tape, &vars.plan, layout, &sample.gt, &matched, &sample.style_bins, w, beta)?;
    let (det, motion) = det_motion_loss(
        tape,
        vars.queries.agent_anchors,
        vars.agent_cls,
        vars.motion,
        &sample.truth.agents,
        beta,
    )?;
    let map = map_loss(tape, vars.queries.map_anchors, vars.map_cls, &sample.truth.map, beta)?;
    let aux = aux_loss(tape, vars.ego, sample.truth.speed, sample.truth.yaw_rate, beta)?;
    let loss = total_loss(tape, plan, det, motion, map, aux, w)?;
    Ok(Some((vars, matched, loss)))
}

/// Planning output for a sample, with the memory filled from its previous
/// frame exactly as during training.
pub fn predict(model: &Model, sample: &Sample, style_on: bool) -> Result<PlanningOutput> {
    let mut bank = model.memory_bank_with(1)?;
    model.infer(&sample.prev, &mut bank, style_on)?;
    Ok(model.infer(&sample.input, &mut bank, style_on)?.output)
}

/// Mean open-loop L2 of the best-scoring modality's reference set over
/// every sample with at least four comparable waypoints.
pub fn open_loop_eval(model: &Model, samples: &[Sample]) -> Result<f64> {
    let r = model.layout.reference()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in samples {
        let out = predict(model, s, true)?;
        if let Some(l2) = open_loop_l2(&out.set(out.best_modality(), r), &s.gt.sets[r]) {
            sum += l2;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no sample has four comparable waypoints".into()));
    }
    Ok(sum / n as f64)
}

/// Initializes a model from the config and fits its anchors to the
/// training futures and map.
pub fn init_model(config: &RunConfig, samples: &[Sample]) -> Result<Model> {
    let mut model = Model::new(config)?;
    let futures: Vec<_> = samples.iter().map(|s| s.truth.future.clone()).collect();
    let lines: Vec<_> = samples.iter().flat_map(|s| s.truth.map.iter().cloned()).collect();
    model.fit_anchors(&futures, &lines)?;
    Ok(model)
}

pub fn metrics_header(model: &Model) -> String {
    let reg: Vec<String> = model.layout.specs.iter().map(|s| format!("reg_{}", s.id())).collect();
    format!(
        "epoch,phase,lr,total,det,motion,map,plan,plan_cls,plan_style,aux,{},skipped,open_loop_l2,config_hash",
        reg.join(",")
    )
}

pub fn metrics_row(e: &EpochLog, hash: &str) -> String {
    let l = &e.loss;
    let reg: Vec<String> = l.plan_reg.iter().map(|v| v.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        e.epoch,
        e.phase,
        e.lr,
        l.total,
        l.det,
        l.motion,
        l.map,
        l.plan,
        l.plan_cls,
        l.plan_style,
        l.aux,
        reg.join(","),
        e.skipped,
        e.open_loop_l2,
        hash
    )
}

/// Trains on `scenarios`. Each epoch's row is appended to `metrics` as it
/// finishes.
pub fn train(config: &RunConfig, scenarios: &[Scenario], mut metrics: Option<&mut dyn Write>) -> Result<Trained> {
    config.validate()?;
    let layout = crate::planning_head::GranularityLayout::from_config(&config.granularity, config.model.modalities)?;
    let samples = build_samples(scenarios, &layout, config)?;
    if samples.is_empty() {
        return Err(Error::Data("no training frames in the scenario set".into()));
    }
    let mut model = init_model(config, &samples)?;
    let hash = config.hash();
    if let Some(w) = metrics.as_mut() {
        writeln!(w, "{}", metrics_header(&model))?;
    }
    let tc = &config.training;
    let epochs = tc.phase1_epochs + tc.phase2_epochs;
    let batch = tc.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let total_steps = epochs * steps_per_epoch;
    let adam = AdamConfig {
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 1..=epochs {
        let phase = if epoch <= tc.phase1_epochs { 1 } else { 2 };
        let style_on = phase == 2;
        order.shuffle(&mut rng);
        let mut reports = Vec::with_capacity(samples.len());
        let mut skipped = 0;
        let mut lr = tc.lr;
        for chunk in order.chunks(batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut used = 0usize;
            for &i in chunk {
                let mut tape = Tape::new();
                let b = model.store.bind(&mut tape);
                let Some((_, _, loss)) = sample_loss(&model, &mut tape, &b, &samples[i], style_on)? else {
                    skipped += 1;
                    continue;
                };
                let report = loss.report(&tape);
                if report.total > tc.divergence_loss {
                    return Err(Error::Divergence {
                        epoch,
                        loss: report.total,
                    });
                }
                let g = model.store.gradients(&b, &tape.backward(loss.total)?);
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += q;
                            }
                        }
                    }
                }
                used += 1;
                reports.push(report);
            }
            lr = cosine_lr(tc.lr, tc.lr_min, step, total_steps);
            step += 1;
            if let Some(mut g) = acc {
                for t in &mut g {
                    t.data_mut().iter_mut().for_each(|v| *v /= used as f64);
                }
                adam_step(&mut model.store, &g, &mut state, lr, &adam)?;
            }
        }
        let entry = EpochLog {
            epoch,
            phase,
            lr,
            loss: LossReport::mean(&reports),
            open_loop_l2: open_loop_eval(&model, &samples)?,
            skipped,
        };
        if !entry.loss.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: entry.loss.total,
            });
        }
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", metrics_row(&entry, &hash))?;
        }
        log.push(entry);
    }
    Ok(Trained { model, log })
}

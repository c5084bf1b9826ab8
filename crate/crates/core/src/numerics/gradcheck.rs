//! Central finite-difference check of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Worst entry over every input of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a small floor so exact zeros do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of `build(inputs)` against central differences
/// with step `h`, perturbing every scalar of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_entries(inputs, &all, h, build)
}

/// Like [`check_gradients`] but perturbs at most `per_input` scalars of each
/// input, chosen by a seeded shuffle. Used for models whose full sweep would
/// take minutes.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor],
    h: f64,
    per_input: usize,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_input);
            idx.sort_unstable();
            idx
        })
        .collect();
    check_entries(inputs, &picks, h, build)
}

fn check_entries<F>(inputs: &[Tensor], picks: &[Vec<usize>], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for &k in &picks[i] {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic.data()[k], numeric);
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
                report.worst_input = i;
                report.worst_index = k;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

//! Named parameters and the small set of layers the model is built from.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named tensors. Order is registration order and is
/// what checkpoints serialize.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let (idx, _) = self
            .entries
            .insert_full(name.to_string(), ParamEntry { tensor, trainable });
        Ok(ParamId(idx))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, e))| (ParamId(i), k.as_str(), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Puts every tensor on the tape: trainable ones as leaves, buffers as
    /// constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Collects per-parameter gradients (zeros for unreachable ones).
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Tape handles for one forward pass over a [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.uniform(&format!("{name}.weight"), &[input, output], input, rng)?;
        let bias = store.uniform(&format!("{name}.bias"), &[output], input, rng)?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    /// Zero weight and bias; used for heads that must start as identities.
    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[input, output])?;
        let bias = store.zeros(&format!("{name}.bias"), &[output])?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.var(self.weight))?;
        tape.add_row(h, b.var(self.bias))
    }
}

/// Affine layers with an activation between them; the last layer is affine
/// only.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(store, name, widths, activation, rng, false)
    }

    /// Same as [`Mlp::new`] but with a zero-initialized final layer.
    pub fn zero_last(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(store, name, widths, activation, rng, true)
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
        zero_last: bool,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("mlp {name} needs at least two widths")));
        }
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let lname = format!("{name}.{i}");
            let last = i + 2 == widths.len();
            layers.push(if last && zero_last {
                Linear::zeroed(store, &lname, w[0], w[1])?
            } else {
                Linear::new(store, &lname, w[0], w[1], rng)?
            });
        }
        Ok(Self { layers, activation })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, b, h)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

/// Row-wise normalization with a learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.insert(&format!("{name}.gain"), Tensor::filled(&[width], 1.0), true)?;
        let bias = store.zeros(&format!("{name}.bias"), &[width])?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LAYER_NORM_EPS);
        let g = tape.mul_row(n, b.var(self.gain))?;
        tape.add_row(g, b.var(self.bias))
    }
}

//! Dense tensors, a reverse-mode tape, layers and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use nn::{Activation, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use tape::{Gradients, Pinhole, Tape, Var};
pub use tensor::Tensor;

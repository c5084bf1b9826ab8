use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Bound, LayerNorm, Linear, Mlp, ParamStore, Tape, Tensor, Var};

/// `softmax(QKᵀ/√C) V`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let c = tape.shape(q)[1] as f64;
    let s = tape.matmul_bt(q, k)?;
    let s = tape.scale(s, 1.0 / c.sqrt());
    let a = tape.softmax_last(s)?;
    tape.matmul(a, v)
}

/// `softmax(QKᵀ/√C − τ·D) V` with one `τ` per query row (`tau: [Nq, 1]`).
pub fn geometric_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    dist: Var,
    tau: Var,
) -> Result<Var> {
    let (nq, nk) = (tape.shape(q)[0], tape.shape(k)[0]);
    if tape.shape(dist) != [nq, nk] {
        return Err(Error::dim("geometric_attention", tape.shape(dist), &[nq, nk]));
    }
    if tape.shape(tau) != [nq, 1] {
        return Err(Error::dim("geometric_attention", tape.shape(tau), &[nq, 1]));
    }
    let c = tape.shape(q)[1] as f64;
    let s = tape.matmul_bt(q, k)?;
    let s = tape.scale(s, 1.0 / c.sqrt());
    let pen = tape.mul_col(dist, tau)?;
    let s = tape.sub(s, pen)?;
    let a = tape.softmax_last(s)?;
    tape.matmul(a, v)
}

/// How the distance coefficient is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TauMode {
    #[default]
    Learned,
    /// `τ ≡ 0`: plain attention with the distance term present but inert.
    Zero,
}

/// Single-head pre-norm attention with a residual connection:
/// `x + O(attn(LN(x), LN(kv)))`.
#[derive(Clone, Debug)]
pub struct GeoAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub tau: Mlp,
}

impl GeoAttention {
    /// `zero_out` starts the block as an identity map.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        tau_hidden: usize,
        tau_bias_init: f64,
        zero_out: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = channels;
        let tau = Mlp::new(store, &format!("{name}.tau"), &[c, tau_hidden, 1], Activation::Relu, rng)?;
        let last = tau.layers.last().expect("two layers").bias;
        *store.get_mut(last) = Tensor::filled(&[1], tau_bias_init);
        Ok(Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), c)?,
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), c)?,
            q: Linear::new(store, &format!("{name}.q"), c, c, rng)?,
            k: Linear::new(store, &format!("{name}.k"), c, c, rng)?,
            v: Linear::new(store, &format!("{name}.v"), c, c, rng)?,
            o: if zero_out {
                Linear::zeroed(store, &format!("{name}.o"), c, c)?
            } else {
                Linear::new(store, &format!("{name}.o"), c, c, rng)?
            },
            tau,
        })
    }

    /// Per-row `τ = softplus(MLP(LN(x)))`.
    pub fn tau_of(&self, tape: &mut Tape, b: &Bound, xn: Var) -> Result<Var> {
        let t = self.tau.forward(tape, b, xn)?;
        Ok(tape.softplus(t))
    }

    /// Self-attention when `kv` is `None`. Without `dist` the block is plain
    /// scaled dot-product attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        kv: Option<Var>,
        dist: Option<Var>,
        mode: TauMode,
    ) -> Result<Var> {
        let xn = self.norm_q.forward(tape, b, x)?;
        let kn = match kv {
            Some(m) => self.norm_kv.forward(tape, b, m)?,
            None => xn,
        };
        let q = self.q.forward(tape, b, xn)?;
        let k = self.k.forward(tape, b, kn)?;
        let v = self.v.forward(tape, b, kn)?;
        let h = match dist {
            Some(d) => {
                let tau = match mode {
                    TauMode::Learned => self.tau_of(tape, b, xn)?,
                    TauMode::Zero => {
                        let n = tape.shape(x)[0];
                        tape.constant(Tensor::zeros(&[n, 1]))
                    }
                };
                geometric_attention(tape, q, k, v, d, tau)?
            }
            None => scaled_dot_attention(tape, q, k, v)?,
        };
        let h = self.o.forward(tape, b, h)?;
        tape.add(x, h)
    }
}

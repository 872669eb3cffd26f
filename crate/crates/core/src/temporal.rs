//! The two temporal kernels shared by both branches and the fusion gate that
//! combines them.
//!
//! Inputs are `[S, T, D]`: `S` independent trajectories (grid cells or
//! graph nodes) of length `T` with `D` channels. Neither kernel mixes
//! trajectories, and both are causal along `T`.
//!
//! Weights act on row vectors: a projection is `x W` with `W` of shape
//! `[D_in, D_out]`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_weight, ParamId, ParamStore};
use crate::tensor::ops::LAYERNORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

/// Scores outside the local window are pushed to this value before the
/// softmax, which makes their weight exactly zero.
pub const MASK_SCORE: f64 = -1e30;
/// Hidden-state magnitude treated as divergence.
pub const STATE_LIMIT: f64 = 1e12;

/// Local masked multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmaParams<H> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub heads: usize,
    /// Number of preceding steps visible to each query (the query step
    /// itself is always visible).
    pub window: usize,
}

/// Selective state-space scan with a diagonal transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StmParams<H> {
    /// Per-channel log transition spectrum, shape `[D]`.
    pub a_log: H,
    /// Learnable step scale, shape `[1]`.
    pub delta_t: H,
    pub w_a: H,
    pub w_b: H,
    pub w_c: H,
}

/// Residual fusion `LayerNorm(z + [L; G] W_f)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcfgParams<H> {
    pub w_f: H,
    pub gamma: H,
    pub beta: H,
}

impl<H: Copy> LmaParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> LmaParams<U> {
        LmaParams {
            w_q: f(self.w_q),
            w_k: f(self.w_k),
            w_v: f(self.w_v),
            heads: self.heads,
            window: self.window,
        }
    }
}

impl<H: Copy> StmParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> StmParams<U> {
        StmParams {
            a_log: f(self.a_log),
            delta_t: f(self.delta_t),
            w_a: f(self.w_a),
            w_b: f(self.w_b),
            w_c: f(self.w_c),
        }
    }
}

impl<H: Copy> AcfgParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> AcfgParams<U> {
        AcfgParams {
            w_f: f(self.w_f),
            gamma: f(self.gamma),
            beta: f(self.beta),
        }
    }
}

impl LmaParams<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        d: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        LmaParams {
            w_q: store.register(format!("{path}.w_q"), init_weight(&[d, d], d, rng)),
            w_k: store.register(format!("{path}.w_k"), init_weight(&[d, d], d, rng)),
            w_v: store.register(format!("{path}.w_v"), init_weight(&[d, d], d, rng)),
            heads,
            window,
        }
    }
}

impl StmParams<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        d: usize,
        dt_init: f64,
        rng: &mut R,
    ) -> Self {
        // exp(dt * a_log) lands in (0, 1): every channel decays.
        let a_log = Tensor::from_fn(&[d], |_| -rng.random_range(f64::EPSILON..1.0));
        StmParams {
            a_log: store.register(format!("{path}.a_log"), a_log),
            delta_t: store.register(format!("{path}.delta_t"), Tensor::scalar(dt_init)),
            w_a: store.register(format!("{path}.w_a"), init_weight(&[d, d], d, rng)),
            w_b: store.register(format!("{path}.w_b"), init_weight(&[d, d], d, rng)),
            w_c: store.register(format!("{path}.w_c"), init_weight(&[d, d], d, rng)),
        }
    }
}

impl AcfgParams<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(store: &mut ParamStore, path: &str, d: usize, rng: &mut R) -> Self {
        AcfgParams {
            w_f: store.register(format!("{path}.w_f"), init_weight(&[2 * d, d], 2 * d, rng)),
            gamma: store.register(format!("{path}.gamma"), Tensor::ones(&[d])),
            beta: store.register(format!("{path}.beta"), Tensor::zeros(&[d])),
        }
    }
}

fn seq_dims(tape: &Tape, seq: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(seq) {
        [s, t, d] => Ok((*s, *t, *d)),
        other => Err(Error::Temporal(format!("sequence must be [S,T,D], got {other:?}"))),
    }
}

/// `T x T` visibility pattern: step `t` sees steps `max(0, t - window) ..= t`.
pub fn window_mask(t_len: usize, window: usize) -> Vec<bool> {
    (0..t_len * t_len)
        .map(|k| {
            let (t, s) = (k / t_len, k % t_len);
            s <= t && t - s <= window
        })
        .collect()
}

/// Attention weights `[S, heads, T, T]` of the local masked attention.
pub fn attention_weights(tape: &mut Tape, seq: Var, p: &LmaParams<Var>) -> Result<Var> {
    let (s, t, d) = seq_dims(tape, seq)?;
    let dh = head_width(d, p.heads)?;
    let q = split_heads(tape, seq, p.w_q, (s, t, p.heads, dh))?;
    let k = split_heads(tape, seq, p.w_k, (s, t, p.heads, dh))?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask: Arc<[bool]> = window_mask(t, p.window).into();
    tape.softmax_rows(scores, Some(mask))
}

fn head_width(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Temporal(format!(
            "channel width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Projects `[S,T,D]` by `w` and splits channels into `[S, heads, T, d]`.
fn split_heads(tape: &mut Tape, seq: Var, w: Var, dims: (usize, usize, usize, usize)) -> Result<Var> {
    let (s, t, h, dh) = dims;
    let x = tape.matmul(seq, w)?;
    let x = tape.reshape(x, &[s, t, h, dh])?;
    tape.permute(x, &[0, 2, 1, 3])
}

/// Local masked attention over each trajectory independently.
pub fn local_masked_attention(tape: &mut Tape, seq: Var, p: &LmaParams<Var>) -> Result<Var> {
    let (s, t, d) = seq_dims(tape, seq)?;
    let dh = head_width(d, p.heads)?;
    let alpha = attention_weights(tape, seq, p)?;
    let v = split_heads(tape, seq, p.w_v, (s, t, p.heads, dh))?;
    let out = tape.matmul(alpha, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[s, t, d])
}

/// Selective scan: `h_t = exp(dt * a_log) * sigmoid(z_t W_a) * h_{t-1} + z_t W_b`,
/// output `h_t W_c`, with `h_0 = 0`.
pub fn stm_scan(tape: &mut Tape, seq: Var, p: &StmParams<Var>) -> Result<Var> {
    let (s, t_len, d) = seq_dims(tape, seq)?;
    if tape.shape(p.a_log) != [d] || tape.shape(p.delta_t) != [1] {
        return Err(Error::Temporal(format!(
            "a_log must be [{d}] and delta_t [1], got {:?} and {:?}",
            tape.shape(p.a_log),
            tape.shape(p.delta_t)
        )));
    }
    let scaled = tape.mul(p.delta_t, p.a_log)?;
    let decay = tape.exp(scaled);
    let gate = tape.matmul(seq, p.w_a)?;
    let gate = tape.sigmoid(gate);
    let a_tilde = tape.mul(gate, decay)?;
    let b_tilde = tape.matmul(seq, p.w_b)?;

    let mut states = Vec::with_capacity(t_len);
    let mut h: Option<Var> = None;
    for step in 0..t_len {
        let b_t = tape.select(b_tilde, 1, step)?;
        let next = match h {
            None => b_t,
            Some(prev) => {
                let a_t = tape.select(a_tilde, 1, step)?;
                let carried = tape.mul(a_t, prev)?;
                tape.add(carried, b_t)?
            }
        };
        let magnitude = tape.value(next).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(magnitude <= STATE_LIMIT) {
            return Err(Error::DivergentState { step, magnitude });
        }
        states.push(tape.reshape(next, &[s, 1, d])?);
        h = Some(next);
    }
    let hidden = tape.concat(&states, 1)?;
    tape.matmul(hidden, p.w_c)
}

/// Fuses local and global paths into the residual stream `z`.
pub fn acfg_fuse(tape: &mut Tape, z: Var, local: Var, global: Var, p: &AcfgParams<Var>) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    if tape.shape(local) != zs.as_slice() || tape.shape(global) != zs.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "acfg_fuse",
            lhs: tape.shape(local).to_vec(),
            rhs: tape.shape(global).to_vec(),
        });
    }
    let cat = tape.concat_last_axis(local, global)?;
    let proj = tape.matmul(cat, p.w_f)?;
    let res = tape.add(z, proj)?;
    tape.layernorm(res, p.gamma, p.beta, LAYERNORM_EPS)
}

/// Which temporal paths feed the fusion gate. A disabled path contributes
/// zeros in its place.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalPaths {
    pub local: bool,
    pub global: bool,
}

impl Default for TemporalPaths {
    fn default() -> Self {
        TemporalPaths {
            local: true,
            global: true,
        }
    }
}

/// LMA and STM in parallel on `z`, then ACFG: the shared body of both
/// branches. Returns `U` of shape `[S, T, D]`.
pub fn temporal_block(
    tape: &mut Tape,
    z: Var,
    lma: &LmaParams<Var>,
    stm: &StmParams<Var>,
    acfg: &AcfgParams<Var>,
    paths: TemporalPaths,
) -> Result<Var> {
    let zeros = |tape: &mut Tape| {
        let shape = tape.shape(z).to_vec();
        tape.constant(Tensor::zeros(&shape))
    };
    let local = if paths.local {
        local_masked_attention(tape, z, lma)?
    } else {
        zeros(tape)
    };
    let global = if paths.global {
        stm_scan(tape, z, stm)?
    } else {
        zeros(tape)
    };
    acfg_fuse(tape, z, local, global, acfg)
}

/// Tape-free convenience wrappers over concrete tensors.
pub mod eval {
    use super::*;

    fn lma_vars(tape: &mut Tape, p: &LmaParams<Tensor>) -> LmaParams<Var> {
        LmaParams {
            w_q: tape.constant(p.w_q.clone()),
            w_k: tape.constant(p.w_k.clone()),
            w_v: tape.constant(p.w_v.clone()),
            heads: p.heads,
            window: p.window,
        }
    }

    pub fn lma(seq: &Tensor, p: &LmaParams<Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.clone());
        let pv = lma_vars(&mut tape, p);
        let out = local_masked_attention(&mut tape, x, &pv)?;
        Ok(tape.value(out).clone())
    }

    pub fn weights(seq: &Tensor, p: &LmaParams<Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.clone());
        let pv = lma_vars(&mut tape, p);
        let out = attention_weights(&mut tape, x, &pv)?;
        Ok(tape.value(out).clone())
    }

    pub fn stm(seq: &Tensor, p: &StmParams<Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.clone());
        let pv = StmParams {
            a_log: tape.constant(p.a_log.clone()),
            delta_t: tape.constant(p.delta_t.clone()),
            w_a: tape.constant(p.w_a.clone()),
            w_b: tape.constant(p.w_b.clone()),
            w_c: tape.constant(p.w_c.clone()),
        };
        let out = stm_scan(&mut tape, x, &pv)?;
        Ok(tape.value(out).clone())
    }

    pub fn acfg(z: &Tensor, local: &Tensor, global: &Tensor, p: &AcfgParams<Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (z, l, g) = (
            tape.constant(z.clone()),
            tape.constant(local.clone()),
            tape.constant(global.clone()),
        );
        let pv = AcfgParams {
            w_f: tape.constant(p.w_f.clone()),
            gamma: tape.constant(p.gamma.clone()),
            beta: tape.constant(p.beta.clone()),
        };
        let out = acfg_fuse(&mut tape, z, l, g, &pv)?;
        Ok(tape.value(out).clone())
    }
}

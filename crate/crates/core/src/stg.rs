//! The geographical branch: grid embedding, spatial convolution and the
//! shared temporal block over per-cell trajectories.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_weight, ParamId, ParamStore, PointwiseMlp};
use crate::temporal::{temporal_block, AcfgParams, LmaParams, StmParams, TemporalPaths};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvParams<H> {
    /// `[D, D, 3, 3]`.
    pub kernel: H,
    pub bias: H,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgParams<H> {
    pub embed: PointwiseMlp<H>,
    pub conv: Vec<ConvParams<H>>,
    pub lma: LmaParams<H>,
    pub stm: StmParams<H>,
    pub acfg: AcfgParams<H>,
}

impl<H: Copy> StgParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> StgParams<U> {
        StgParams {
            embed: self.embed.map(f),
            conv: self
                .conv
                .iter()
                .map(|c| ConvParams {
                    kernel: f(c.kernel),
                    bias: f(c.bias),
                })
                .collect(),
            lma: self.lma.map(f),
            stm: self.stm.map(f),
            acfg: self.acfg.map(f),
        }
    }
}

/// Widths and temporal hyperparameters shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchDims {
    pub features: usize,
    pub d: usize,
    pub heads: usize,
    pub window: usize,
    pub dt_init: f64,
}

impl StgParams<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: BranchDims,
        conv_layers: usize,
        rng: &mut R,
    ) -> Self {
        let d = dims.d;
        let embed = PointwiseMlp::register(store, "stg.embed", (dims.features, d, d), rng);
        let conv = (0..conv_layers)
            .map(|l| ConvParams {
                kernel: store.register(format!("stg.conv.{l}.kernel"), init_weight(&[d, d, 3, 3], 9 * d, rng)),
                bias: store.register(format!("stg.conv.{l}.bias"), Tensor::zeros(&[d])),
            })
            .collect();
        StgParams {
            embed,
            conv,
            lma: LmaParams::register(store, "stg.lma", d, dims.heads, dims.window, rng),
            stm: StmParams::register(store, "stg.stm", d, dims.dt_init, rng),
            acfg: AcfgParams::register(store, "stg.acfg", d, rng),
        }
    }
}

/// Per-cell feature MLP: `[T, M, F] -> [T, M, D]`.
pub fn embed_geo(tape: &mut Tape, x: Var, p: &PointwiseMlp<Var>) -> Result<Var> {
    let f_in = tape.shape(p.first.weight)[0];
    match tape.shape(x) {
        [_, _, f] if *f == f_in => p.forward(tape, x),
        other => Err(Error::Model(format!(
            "geo input must be [T, M, {f_in}], got {other:?}"
        ))),
    }
}

/// `[T, W*H, D]` to `[T, D, W, H]`.
fn to_planes(tape: &mut Tape, x: Var, w: usize, h: usize) -> Result<Var> {
    let (t, d) = (tape.shape(x)[0], tape.shape(x)[2]);
    let x = tape.reshape(x, &[t, w, h, d])?;
    tape.permute(x, &[0, 3, 1, 2])
}

/// Last step of `[S, T, D]` as a `[D, W, H]` map.
pub(crate) fn last_step_grid(tape: &mut Tape, seq: Var, w: usize, h: usize) -> Result<Var> {
    let t = tape.shape(seq)[1];
    let d = tape.shape(seq)[2];
    let last = tape.select(seq, 1, t - 1)?;
    let last = tape.transpose(last)?;
    tape.reshape(last, &[d, w, h])
}

/// The conv stage alone, returning per-cell trajectories `[W*H, T, D]`.
pub fn stg_trajectories(tape: &mut Tape, x: Var, w: usize, h: usize, p: &StgParams<Var>) -> Result<Var> {
    check_grid(tape, x, w, h)?;
    let z = embed_geo(tape, x, &p.embed)?;
    let (t, d) = (tape.shape(z)[0], tape.shape(z)[2]);
    let mut planes = to_planes(tape, z, w, h)?;
    for (l, c) in p.conv.iter().enumerate() {
        if l > 0 {
            planes = tape.relu(planes);
        }
        planes = tape.conv2d_3x3(planes, c.kernel, c.bias)?;
    }
    let cells = tape.permute(planes, &[2, 3, 0, 1])?;
    tape.reshape(cells, &[w * h, t, d])
}

fn check_grid(tape: &Tape, x: Var, w: usize, h: usize) -> Result<()> {
    match tape.shape(x) {
        [_, m, _] if *m == w * h => Ok(()),
        other => Err(Error::Model(format!(
            "geo input {other:?} does not cover a {w}x{h} grid"
        ))),
    }
}

/// Full branch output `[D, W, H]` from geo input `[T, W*H, F_geo]`.
pub fn stg_forward(
    tape: &mut Tape,
    x: Var,
    w: usize,
    h: usize,
    p: &StgParams<Var>,
    paths: TemporalPaths,
) -> Result<Var> {
    let z = stg_trajectories(tape, x, w, h, p)?;
    let u = temporal_block(tape, z, &p.lma, &p.stm, &p.acfg, paths)?;
    last_step_grid(tape, u, w, h)
}

/// Bypass used when the branch is ablated: the embedded features of the
/// last step arranged as a `[D, W, H]` map.
pub fn stg_bypass(tape: &mut Tape, x: Var, w: usize, h: usize, p: &StgParams<Var>) -> Result<Var> {
    check_grid(tape, x, w, h)?;
    let z = embed_geo(tape, x, &p.embed)?;
    let z = tape.permute(z, &[1, 0, 2])?;
    last_step_grid(tape, z, w, h)
}

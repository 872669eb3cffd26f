//! The semantic branch: node embedding, adaptive multi-support graph
//! convolution, the shared temporal block and projection onto the grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{adaptive_adjacency_on, block_diag, GridNodeMap, SupportSet};
use crate::params::{init_weight, ParamId, ParamStore, PointwiseMlp};
use crate::stg::BranchDims;
use crate::temporal::{temporal_block, AcfgParams, LmaParams, StmParams, TemporalPaths};
use crate::tensor::{Tape, Tensor, Var};

/// Number of supports: road, risk, POI and the adaptive relation.
pub const NUM_SUPPORTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StsParams<H> {
    pub embed: PointwiseMlp<H>,
    /// One weight per support for every layer, each `[D, D]`.
    pub agcn: Vec<[H; NUM_SUPPORTS]>,
    pub lma: LmaParams<H>,
    pub stm: StmParams<H>,
    pub acfg: AcfgParams<H>,
}

impl<H: Copy> StsParams<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> StsParams<U> {
        StsParams {
            embed: self.embed.map(f),
            agcn: self.agcn.iter().map(|ws| ws.map(&mut *f)).collect(),
            lma: self.lma.map(f),
            stm: self.stm.map(f),
            acfg: self.acfg.map(f),
        }
    }

    pub fn layers(&self) -> usize {
        self.agcn.len()
    }
}

impl StsParams<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dims: BranchDims,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let d = dims.d;
        let embed = PointwiseMlp::register(store, "sts.embed", (dims.features, d, d), rng);
        let agcn = (0..layers)
            .map(|l| {
                std::array::from_fn(|j| {
                    store.register(format!("sts.agcn.{l}.{j}"), init_weight(&[d, d], NUM_SUPPORTS * d, rng))
                })
            })
            .collect();
        StsParams {
            embed,
            agcn,
            lma: LmaParams::register(store, "sts.lma", d, dims.heads, dims.window, rng),
            stm: StmParams::register(store, "sts.stm", d, dims.dt_init, rng),
            acfg: AcfgParams::register(store, "sts.acfg", d, rng),
        }
    }
}

/// `relu(sum_j A_j S_t W_j)` for every step `t` of `s: [N, T, D_in]`.
pub fn agcn_layer(tape: &mut Tape, s: Var, supports: &[Var], weights: &[Var]) -> Result<Var> {
    if supports.len() != weights.len() || supports.is_empty() {
        return Err(Error::Model(format!(
            "{} supports paired with {} weights",
            supports.len(),
            weights.len()
        )));
    }
    let (n, t, d_in) = match tape.shape(s) {
        [n, t, d] => (*n, *t, *d),
        other => return Err(Error::Model(format!("node sequence must be [N,T,D], got {other:?}"))),
    };
    for &a in supports {
        if tape.shape(a) != [n, n] {
            return Err(Error::Model(format!(
                "support {:?} does not match {n} nodes",
                tape.shape(a)
            )));
        }
    }
    let flat = tape.reshape(s, &[n, t * d_in])?;
    let mut acc: Option<Var> = None;
    for (&a, &wj) in supports.iter().zip(weights) {
        let mixed = tape.matmul(a, flat)?;
        let mixed = tape.reshape(mixed, &[n, t, d_in])?;
        let term = tape.matmul(mixed, wj)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(tape.relu(acc.expect("at least one support")))
}

/// One city's semantic input.
#[derive(Clone, Copy, Debug)]
pub struct StsCity<'a> {
    /// `[T, N, F_sem]`.
    pub x: Var,
    pub supports: &'a SupportSet,
    pub map: &'a GridNodeMap,
    /// Adaptive embeddings `[N, r]`.
    pub e1: Var,
    pub e2: Var,
}

fn check_city(tape: &Tape, c: &StsCity, t_len: usize, f_in: usize) -> Result<()> {
    let n = c.supports.n();
    if c.supports.blocks().len() != 1 {
        return Err(Error::Model("a city must carry a single-block support set".into()));
    }
    if tape.shape(c.x) != [t_len, n, f_in] {
        return Err(Error::Model(format!(
            "semantic input {:?} does not match [{t_len}, {n}, {f_in}]",
            tape.shape(c.x)
        )));
    }
    if c.map.n() != n {
        return Err(Error::Model(format!(
            "grid-node map covers {} nodes, supports have {n}",
            c.map.n()
        )));
    }
    Ok(())
}

/// Runs the branch on several cities at once. Nodes are stacked along one
/// axis and every support is block diagonal, so no value crosses a city
/// boundary. Returns one `[D, W_c, H_c]` map per city.
pub fn sts_forward(
    tape: &mut Tape,
    cities: &[StsCity],
    p: &StsParams<Var>,
    paths: TemporalPaths,
) -> Result<Vec<Var>> {
    let nodes = sts_trajectories(tape, cities, p)?;
    let u = temporal_block(tape, nodes, &p.lma, &p.stm, &p.acfg, paths)?;
    project(tape, cities, u)
}

/// Embedding and graph convolution: stacked node trajectories `[sum N, T, D]`.
pub fn sts_trajectories(tape: &mut Tape, cities: &[StsCity], p: &StsParams<Var>) -> Result<Var> {
    let z = embed_stacked(tape, cities, p)?;
    if p.agcn.is_empty() {
        return Ok(z);
    }
    let supports = stacked_supports(tape, cities)?;
    let mut s = z;
    for ws in &p.agcn {
        s = agcn_layer(tape, s, &supports, ws)?;
    }
    Ok(s)
}

fn embed_stacked(tape: &mut Tape, cities: &[StsCity], p: &StsParams<Var>) -> Result<Var> {
    let first = cities
        .first()
        .ok_or_else(|| Error::Model("no cities given to the semantic branch".into()))?;
    let t_len = tape.shape(first.x)[0];
    let f_in = tape.shape(p.embed.first.weight)[0];
    for c in cities {
        check_city(tape, c, t_len, f_in)?;
    }
    let xs: Vec<Var> = cities.iter().map(|c| c.x).collect();
    let x = if xs.len() == 1 { xs[0] } else { tape.concat(&xs, 1)? };
    let z = p.embed.forward(tape, x)?;
    tape.permute(z, &[1, 0, 2])
}

/// The four block-diagonal supports over the stacked node axis.
fn stacked_supports(tape: &mut Tape, cities: &[StsCity]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(NUM_SUPPORTS);
    for j in 0..NUM_SUPPORTS - 1 {
        let blocks: Vec<&Tensor> = cities.iter().map(|c| &c.supports.normalized()[j]).collect();
        out.push(tape.constant(block_diag(&blocks)?));
    }
    let total: usize = cities.iter().map(|c| c.supports.n()).sum();
    let mut rows = Vec::with_capacity(cities.len());
    let mut offset = 0;
    for c in cities {
        let n = c.supports.n();
        let block = adaptive_adjacency_on(tape, c.e1, c.e2, None)?;
        if tape.shape(block) != [n, n] {
            return Err(Error::Model(format!(
                "adaptive embeddings give {:?}, city has {n} nodes",
                tape.shape(block)
            )));
        }
        let mut parts = Vec::with_capacity(3);
        if offset > 0 {
            parts.push(tape.constant(Tensor::zeros(&[n, offset])));
        }
        parts.push(block);
        if total > offset + n {
            parts.push(tape.constant(Tensor::zeros(&[n, total - offset - n])));
        }
        rows.push(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? });
        offset += n;
    }
    out.push(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? });
    Ok(out)
}

/// `M_c U_T` for each city, reshaped to `[D, W_c, H_c]`.
fn project(tape: &mut Tape, cities: &[StsCity], u: Var) -> Result<Vec<Var>> {
    let t = tape.shape(u)[1];
    let last = tape.select(u, 1, t - 1)?;
    let mut out = Vec::with_capacity(cities.len());
    let mut offset = 0;
    for c in cities {
        let n = c.supports.n();
        let own = tape.narrow(last, 0, offset, n)?;
        out.push(project_nodes(tape, c.map, own)?);
        offset += n;
    }
    Ok(out)
}

/// Grid embedding `[D, W, H]` from node vectors `[N, D]`.
fn project_nodes(tape: &mut Tape, map: &GridNodeMap, nodes: Var) -> Result<Var> {
    let d = tape.shape(nodes)[1];
    let m = tape.constant(map.matrix.clone());
    let cells = tape.matmul(m, nodes)?;
    let cells = tape.transpose(cells)?;
    tape.reshape(cells, &[d, map.w, map.h])
}

/// Bypass used when the branch is ablated: last-step node embeddings
/// projected onto each city's grid.
pub fn sts_bypass(tape: &mut Tape, cities: &[StsCity], p: &StsParams<Var>) -> Result<Vec<Var>> {
    let z = embed_stacked(tape, cities, p)?;
    project(tape, cities, z)
}


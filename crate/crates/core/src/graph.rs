//! Heterogeneous adjacency supports and the grid-node projection.
//!
//! Each city carries three fixed relations (road, risk co-occurrence, POI
//! similarity) plus one learned adaptive relation. Several cities are
//! composed into one block-diagonal system with no cross-city edges.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Self-loop weight added before symmetric normalization.
pub const SELF_LOOP: f64 = 1.0;
const SYMMETRY_TOL: f64 = 1e-9;

/// Upper bound on the adaptive embedding rank.
pub const MAX_ADAPTIVE_RANK: usize = 8;

pub fn default_rank(n: usize) -> usize {
    n.clamp(1, MAX_ADAPTIVE_RANK)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportKind {
    Road,
    Risk,
    Poi,
    Adaptive,
}

impl SupportKind {
    pub const FIXED: [SupportKind; 3] = [SupportKind::Road, SupportKind::Risk, SupportKind::Poi];
    pub const ALL: [SupportKind; 4] = [
        SupportKind::Road,
        SupportKind::Risk,
        SupportKind::Poi,
        SupportKind::Adaptive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SupportKind::Road => "road",
            SupportKind::Risk => "risk",
            SupportKind::Poi => "poi",
            SupportKind::Adaptive => "adaptive",
        }
    }
}

fn square_extent(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::Graph(format!("support must be square, got {s:?}"))),
    }
}

fn validate_relation(a: &Tensor) -> Result<usize> {
    let n = square_extent(a)?;
    let d = a.data();
    for i in 0..n {
        for j in 0..n {
            let v = d[i * n + j];
            if !(v >= 0.0) {
                return Err(Error::Graph(format!("negative entry {v} at ({i},{j})")));
            }
            if j > i && (v - d[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Graph(format!(
                    "asymmetric support: A[{i},{j}]={v} but A[{j},{i}]={}",
                    d[j * n + i]
                )));
            }
        }
    }
    Ok(n)
}

/// `D^{-1/2} (A + s I) D^{-1/2}` with `s` = [`SELF_LOOP`].
pub fn normalize_support(a: &Tensor) -> Result<Tensor> {
    normalize_support_with(a, SELF_LOOP)
}

/// Symmetric degree normalization with an explicit self-loop weight.
/// Nodes whose degree is zero keep an all-zero row and column.
pub fn normalize_support_with(a: &Tensor, self_loop: f64) -> Result<Tensor> {
    let n = validate_relation(a)?;
    let d = a.data();
    let mut loops = d.to_vec();
    for i in 0..n {
        loops[i * n + i] += self_loop;
    }
    let deg: Vec<f64> = (0..n).map(|i| loops[i * n..(i + 1) * n].iter().sum()).collect();
    let out = (0..n * n)
        .map(|k| {
            let dd = deg[k / n] * deg[k % n];
            if dd > 0.0 {
                loops[k] / dd.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![n, n], out)
}

/// Row-wise `softmax(relu(e1 e2^T))`.
pub fn adaptive_adjacency(e1: &Tensor, e2: &Tensor) -> Result<Tensor> {
    check_embeddings(e1, e2)?;
    let logits = ops::relu(&ops::matmul(e1, &e2.transpose()?)?);
    ops::softmax_rows(&logits, None)
}

fn check_embeddings(e1: &Tensor, e2: &Tensor) -> Result<()> {
    if e1.rank() != 2 || e1.shape() != e2.shape() {
        return Err(Error::Graph(format!(
            "adaptive embeddings must both be N x r, got {:?} and {:?}",
            e1.shape(),
            e2.shape()
        )));
    }
    Ok(())
}

/// Records the adaptive support on `tape`. With `mask`, entries whose mask
/// is false are excluded from each row's softmax and are exactly zero.
pub fn adaptive_adjacency_on(
    tape: &mut Tape,
    e1: Var,
    e2: Var,
    mask: Option<Arc<[bool]>>,
) -> Result<Var> {
    check_embeddings(tape.value(e1), tape.value(e2))?;
    let e2t = tape.transpose(e2)?;
    let logits = tape.matmul(e1, e2t)?;
    let logits = tape.relu(logits);
    tape.softmax_rows(logits, mask)
}

/// Rank-`r` factors of `a_prior` from its top singular triplets:
/// `e1 = U_r sqrt(S_r)`, `e2 = V_r sqrt(S_r)`, so `e1 e2^T` is the best
/// rank-`r` approximation in Frobenius norm.
pub fn init_adaptive_embeddings(a_prior: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let n = validate_relation(a_prior)?;
    if r == 0 || r > n {
        return Err(Error::Graph(format!("adaptive rank {r} outside 1..={n}")));
    }
    let m = DMatrix::from_row_slice(n, n, a_prior.data());
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested U");
    let v_t = svd.v_t.expect("svd requested V^T");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut e1 = vec![0.0; n * r];
    let mut e2 = vec![0.0; n * r];
    for (col, &k) in order.iter().take(r).enumerate() {
        let s = svd.singular_values[k].max(0.0).sqrt();
        for row in 0..n {
            e1[row * r + col] = u[(row, k)] * s;
            e2[row * r + col] = v_t[(k, row)] * s;
        }
    }
    Ok((Tensor::new(vec![n, r], e1)?, Tensor::new(vec![n, r], e2)?))
}

/// Places matrices along the diagonal of a zero matrix.
pub fn block_diag(blocks: &[&Tensor]) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(Error::Graph("block_diag of zero blocks".into()));
    }
    for b in blocks {
        if b.rank() != 2 {
            return Err(Error::Graph(format!("block must be a matrix, got {:?}", b.shape())));
        }
    }
    let rows: usize = blocks.iter().map(|b| b.shape()[0]).sum();
    let cols: usize = blocks.iter().map(|b| b.shape()[1]).sum();
    let mut out = vec![0.0; rows * cols];
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        let (br, bc) = (b.shape()[0], b.shape()[1]);
        for i in 0..br {
            out[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + bc]
                .copy_from_slice(&b.data()[i * bc..(i + 1) * bc]);
        }
        r0 += br;
        c0 += bc;
    }
    Tensor::new(vec![rows, cols], out)
}

/// Row-major boolean pattern that is true exactly on the diagonal blocks.
pub fn block_mask(sizes: &[usize]) -> Vec<bool> {
    let n: usize = sizes.iter().sum();
    let mut block_of = Vec::with_capacity(n);
    for (b, &s) in sizes.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, s));
    }
    (0..n * n).map(|k| block_of[k / n] == block_of[k % n]).collect()
}

/// The fixed relations of one city (or a block-diagonal composition of
/// several), their normalized forms, and the prior-derived initial
/// embeddings for the adaptive relation of each block.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub road: Tensor,
    pub risk: Tensor,
    pub poi: Tensor,
    normalized: Vec<Tensor>,
    blocks: Vec<usize>,
    adaptive_init: Vec<(Tensor, Tensor)>,
}

impl SupportSet {
    /// Builds a single-city set. A missing POI relation becomes the identity.
    /// `rank` defaults to [`default_rank`]; embeddings come from the road prior.
    pub fn new(road: Tensor, risk: Tensor, poi: Option<Tensor>, rank: Option<usize>) -> Result<Self> {
        let n = validate_relation(&road)?;
        let poi = poi.unwrap_or_else(|| Tensor::eye(n));
        for (kind, a) in [(SupportKind::Risk, &risk), (SupportKind::Poi, &poi)] {
            if validate_relation(a)? != n {
                return Err(Error::Graph(format!(
                    "{} support is {:?}, road is {n}x{n}",
                    kind.name(),
                    a.shape()
                )));
            }
        }
        let normalized = vec![
            normalize_support(&road)?,
            normalize_support(&risk)?,
            normalize_support(&poi)?,
        ];
        let r = rank.unwrap_or_else(|| default_rank(n));
        let adaptive_init = vec![init_adaptive_embeddings(&road, r)?];
        Ok(SupportSet {
            road,
            risk,
            poi,
            normalized,
            blocks: vec![n],
            adaptive_init,
        })
    }

    pub fn n(&self) -> usize {
        self.road.shape()[0]
    }

    /// Node counts of the diagonal blocks (one per city).
    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// Normalized road, risk and POI supports.
    pub fn normalized(&self) -> &[Tensor] {
        &self.normalized
    }

    pub fn adaptive_init(&self) -> &[(Tensor, Tensor)] {
        &self.adaptive_init
    }

    pub fn raw(&self, kind: SupportKind) -> Option<&Tensor> {
        match kind {
            SupportKind::Road => Some(&self.road),
            SupportKind::Risk => Some(&self.risk),
            SupportKind::Poi => Some(&self.poi),
            SupportKind::Adaptive => None,
        }
    }

    /// All J = 4 supports, with the adaptive one computed from the stored
    /// initial embeddings of each block.
    pub fn materialize(&self) -> Result<Vec<Tensor>> {
        let adaptive: Vec<Tensor> = self
            .adaptive_init
            .iter()
            .map(|(e1, e2)| adaptive_adjacency(e1, e2))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = adaptive.iter().collect();
        let mut all = self.normalized.clone();
        all.push(block_diag(&refs)?);
        Ok(all)
    }
}

/// Composes per-city support sets into one block-diagonal set.
pub fn block_diagonal(sets: &[SupportSet]) -> Result<SupportSet> {
    if sets.is_empty() {
        return Err(Error::Graph("block_diagonal needs at least one city".into()));
    }
    let compose = |f: &dyn Fn(&SupportSet) -> &Tensor| -> Result<Tensor> {
        let refs: Vec<&Tensor> = sets.iter().map(f).collect();
        block_diag(&refs)
    };
    let normalized = (0..3)
        .map(|j| compose(&|s: &SupportSet| &s.normalized[j]))
        .collect::<Result<Vec<_>>>()?;
    Ok(SupportSet {
        road: compose(&|s| &s.road)?,
        risk: compose(&|s| &s.risk)?,
        poi: compose(&|s| &s.poi)?,
        normalized,
        blocks: sets.iter().flat_map(|s| s.blocks.iter().copied()).collect(),
        adaptive_init: sets.iter().flat_map(|s| s.adaptive_init.iter().cloned()).collect(),
    })
}

/// Mean-aggregating projection from road-network nodes to grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GridNodeMap {
    /// `(w*h) x n`, row `m` holds `1/k` at each of the `k` nodes in cell `m`.
    pub matrix: Tensor,
    /// Cell index (row-major over `(w, h)`) of every node.
    pub assignments: Vec<usize>,
    pub w: usize,
    pub h: usize,
}

pub fn build_grid_node_map(cells_of_node: &[usize], w: usize, h: usize, n: usize) -> Result<GridNodeMap> {
    if w == 0 || h == 0 || n == 0 {
        return Err(Error::Graph(format!("degenerate map dims w={w} h={h} n={n}")));
    }
    if cells_of_node.len() < n {
        return Err(Error::Graph(format!(
            "node {} is not assigned to any cell",
            cells_of_node.len()
        )));
    }
    if cells_of_node.len() > n {
        return Err(Error::Graph(format!(
            "{} assignments given for {n} nodes",
            cells_of_node.len()
        )));
    }
    let cells = w * h;
    let mut counts = vec![0usize; cells];
    for (node, &c) in cells_of_node.iter().enumerate() {
        if c >= cells {
            return Err(Error::Graph(format!(
                "node {node} assigned to cell {c}, grid has {cells} cells"
            )));
        }
        counts[c] += 1;
    }
    let mut m = vec![0.0; cells * n];
    for (node, &c) in cells_of_node.iter().enumerate() {
        m[c * n + node] = 1.0 / counts[c] as f64;
    }
    Ok(GridNodeMap {
        matrix: Tensor::new(vec![cells, n], m)?,
        assignments: cells_of_node.to_vec(),
        w,
        h,
    })
}

impl GridNodeMap {
    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    /// Rebuilds the map from a stored matrix (as written by the dataset
    /// writer): each node's cell is the row holding its nonzero entry.
    pub fn from_matrix(matrix: Tensor, w: usize, h: usize) -> Result<Self> {
        let (cells, n) = match matrix.shape() {
            [c, n] if *c == w * h => (*c, *n),
            s => return Err(Error::Graph(format!("map matrix {s:?} does not fit a {w}x{h} grid"))),
        };
        let mut assignments = Vec::with_capacity(n);
        for node in 0..n {
            let cell = (0..cells)
                .find(|&c| matrix.data()[c * n + node] != 0.0)
                .ok_or_else(|| Error::Graph(format!("node {node} maps to no cell")))?;
            assignments.push(cell);
        }
        build_grid_node_map(&assignments, w, h, n)
    }
}

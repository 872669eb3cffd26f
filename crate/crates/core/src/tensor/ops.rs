//! Forward kernels. Each is a pure function of its inputs; the tape in
//! `tape.rs` records calls to these and supplies the adjoints.

use super::{strides_of, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Matrix product over the two trailing axes.
///
/// `a` is `[..., m, k]`. `b` is either `[k, n]` (shared across the batch)
/// or `[..., k, n]` with the same leading extents as `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let batch_a = &a.shape()[..a.rank() - 2];
    let batch_b = &b.shape()[..b.rank() - 2];
    let shared = batch_b.is_empty();
    if !shared && batch_a != batch_b {
        return Err(mismatch());
    }
    let batch: usize = batch_a.iter().product();
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ad = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bd = if shared {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        let od = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut od[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    let mut shape = batch_a.to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (batch, cin, w, h) = match x.shape() {
        [c, w, h] => (1, *c, *w, *h),
        [b, c, w, h] => (*b, *c, *w, *h),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "conv2d_3x3 input must be [C,W,H] or [B,C,W,H]".into(),
            })
        }
    };
    let cout = match kernel.shape() {
        [co, ci, 3, 3] if *ci == cin => *co,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d_3x3 (channels)",
                lhs: x.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            })
        }
    };
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_3x3 (bias)",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((batch, cin, cout, w, h))
}

/// Output rows (or columns) `lo..hi` that read input offset `d - 1` inside
/// an axis of length `len`.
fn tap_range(d: usize, len: usize) -> (usize, usize) {
    (1usize.saturating_sub(d), (len + 1).saturating_sub(d).min(len))
}

/// 3x3 convolution, stride 1, zero padding 1: spatial extents are preserved.
/// Accepts `[C_in, W, H]` or a batch `[B, C_in, W, H]`.
pub fn conv2d_3x3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, cin, cout, w, h) = conv_dims(x, kernel, bias)?;
    let plane = w * h;
    let mut out = vec![0.0; batch * cout * plane];
    let mut acc = vec![0.0; plane];
    let xd = x.data();
    let kd = kernel.data();
    for b in 0..batch {
        for co in 0..cout {
            let od = &mut out[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            od.iter_mut().for_each(|o| *o = bias.data()[co]);
            for ci in 0..cin {
                let xp = &xd[(b * cin + ci) * plane..(b * cin + ci + 1) * plane];
                let kk = &kd[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                acc.iter_mut().for_each(|a| *a = 0.0);
                for di in 0..3 {
                    let (i0, i1) = tap_range(di, w);
                    for dj in 0..3 {
                        let (j0, j1) = tap_range(dj, h);
                        let kv = kk[di * 3 + dj];
                        for i in i0..i1 {
                            let src = (i + di - 1) * h + j0 + dj - 1;
                            let arow = &mut acc[i * h + j0..i * h + j1];
                            for (a, &xv) in arow.iter_mut().zip(&xp[src..src + j1 - j0]) {
                                *a += kv * xv;
                            }
                        }
                    }
                }
                for (o, a) in od.iter_mut().zip(&acc) {
                    *o += a;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[x.rank() - 3] = cout;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`conv2d_3x3`]: returns `(d_input, d_kernel, d_bias)`.
pub(crate) fn conv2d_3x3_backward(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, cin, cout, w, h) = conv_dims(x, kernel, bias)?;
    let plane = w * h;
    let xd = x.data();
    let kd = kernel.data();
    let gd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; cout];
    for b in 0..batch {
        for co in 0..cout {
            let g = &gd[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            db[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let xbase = (b * cin + ci) * plane;
                let kbase = (co * cin + ci) * 9;
                for di in 0..3 {
                    let (i0, i1) = tap_range(di, w);
                    for dj in 0..3 {
                        let (j0, j1) = tap_range(dj, h);
                        let kv = kd[kbase + di * 3 + dj];
                        let mut dot = 0.0;
                        for i in i0..i1 {
                            let src = xbase + (i + di - 1) * h + j0 + dj - 1;
                            let grow = &g[i * h + j0..i * h + j1];
                            for (&gv, &xv) in grow.iter().zip(&xd[src..src + j1 - j0]) {
                                dot += gv * xv;
                            }
                            for (d, &gv) in dx[src..src + j1 - j0].iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        }
                        dk[kbase + di * 3 + dj] += dot;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
        Tensor::from_parts(vec![cout], db),
    ))
}

/// Checks that `mask` tiles `x`: its length is a multiple of the last
/// extent and divides the element count. A mask equal to `x`'s full size is
/// the common case; a shorter one is repeated over the leading axes.
fn check_mask(x: &Tensor, mask: &[bool]) -> Result<()> {
    let n = x.shape()[x.rank() - 1];
    if mask.is_empty() || mask.len() % n != 0 || x.numel() % mask.len() != 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows (mask)",
            lhs: x.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(())
}

/// Softmax over the last axis. Entries whose mask is `false` are excluded
/// from the normalization and come out as exactly 0.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if let Some(m) = mask {
        check_mask(x, m)?;
    }
    let n = x.shape()[x.rank() - 1];
    let rows = x.numel() / n;
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let keep = |j: usize| mask.map_or(true, |m| m[(r * n + j) % m.len()]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let orow = &mut out[r * n..(r + 1) * n];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-vector statistics kept for the layernorm adjoint.
#[derive(Clone, Debug)]
pub(crate) struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layernorm_with_cache(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.shape()[x.rank() - 1];
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let mut normalized = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let v = &x.data()[r * d..(r + 1) * d];
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..d {
            let nv = (v[j] - mean) * rstd;
            normalized[r * d + j] = nv;
            out[r * d + j] = nv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(x.shape().to_vec(), normalized),
            inv_std,
        },
    ))
}

/// Standardizes each vector along the last axis, then applies `gamma` and `beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn exp(x: &Tensor) -> Tensor {
    x.map(f64::exp)
}

/// Numpy-style broadcast of two shapes (trailing alignment, extent-1 stretch).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` as seen from a broadcast output of rank `rank`;
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

fn broadcast_binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..numel {
        out.push(f(a.data()[ia], b.data()[ib]));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(shape, out_shape);
    let mut out = vec![0.0; shape.iter().product()];
    let mut idx = vec![0usize; out_shape.len()];
    let mut io = 0usize;
    for &g in grad.data() {
        out[io] += g;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            io += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            io -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "concat of zero tensors".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: format!("concat axis {axis} out of range"),
        });
    }
    for p in parts {
        let same = p.rank() == rank
            && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !same {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat_last_axis(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat(&[a, b], a.rank() - 1)
}

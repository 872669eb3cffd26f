//! Independent reference implementations used as test oracles.

use crossrisk::temporal::{LmaParams, StmParams};
use crossrisk::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Attention for one trajectory and one head by direct enumeration of the
/// visible window.
pub fn enumerate_lma(seq: &Tensor, p: &LmaParams<Tensor>) -> Tensor {
    let (s_len, t_len, d) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let dh = d / p.heads;
    let proj = |w: &Tensor, s: usize, t: usize, c: usize| -> f64 {
        (0..d).map(|k| seq.get(&[s, t, k]) * w.get(&[k, c])).sum()
    };
    Tensor::from_fn(&[s_len, t_len, d], |idx| {
        let (s, t, c) = (idx / (t_len * d), (idx / d) % t_len, idx % d);
        let head = c / dh;
        let cols = head * dh..(head + 1) * dh;
        let lo = t.saturating_sub(p.window);
        let scores: Vec<f64> = (lo..=t)
            .map(|u| {
                cols.clone().map(|cc| proj(&p.w_q, s, t, cc) * proj(&p.w_k, s, u, cc)).sum::<f64>()
                    / (dh as f64).sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|v| (v - max).exp()).sum();
        (lo..=t)
            .zip(&scores)
            .map(|(u, sc)| (sc - max).exp() / z * proj(&p.w_v, s, u, c))
            .sum()
    })
}

/// The recurrence written out with scalar loops.
pub fn unroll_stm(seq: &Tensor, p: &StmParams<Tensor>) -> Tensor {
    let (s_len, t_len, d) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
    let dt = p.delta_t.item();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut out = vec![0.0; s_len * t_len * d];
    for s in 0..s_len {
        let mut h = vec![0.0; d];
        for t in 0..t_len {
            let z: Vec<f64> = (0..d).map(|k| seq.get(&[s, t, k])).collect();
            let lin = |w: &Tensor, c: usize| (0..d).map(|k| z[k] * w.get(&[k, c])).sum::<f64>();
            h = (0..d)
                .map(|c| (dt * p.a_log.data()[c]).exp() * sig(lin(&p.w_a, c)) * h[c] + lin(&p.w_b, c))
                .collect();
            for c in 0..d {
                out[(s * t_len + t) * d + c] = (0..d).map(|k| h[k] * p.w_c.get(&[k, c])).sum();
            }
        }
    }
    Tensor::new(vec![s_len, t_len, d], out).unwrap()
}

pub fn agcn_oracle(s: &Tensor, supports: &[Tensor], weights: &[Tensor]) -> Tensor {
    let (n, t, d_in) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let d_out = weights[0].shape()[1];
    Tensor::from_fn(&[n, t, d_out], |k| {
        let (i, step, o) = (k / (t * d_out), (k / d_out) % t, k % d_out);
        let mut acc = 0.0;
        for (a, w) in supports.iter().zip(weights) {
            for j in 0..n {
                for c in 0..d_in {
                    acc += a.get(&[i, j]) * s.get(&[j, step, c]) * w.get(&[c, o]);
                }
            }
        }
        acc.max(0.0)
    })
}

/// Selected cells: fewer than `k` valid cells rank strictly ahead.
pub fn recall_oracle(pred: &[f64], truth: &[f64], mask: &[bool]) -> Option<f64> {
    let cells = mask.len();
    let mut scores = Vec::new();
    for (p, t) in pred.chunks(cells).zip(truth.chunks(cells)) {
        let s_true: Vec<usize> = (0..cells).filter(|&c| mask[c] && t[c] > 0.0).collect();
        if s_true.is_empty() {
            continue;
        }
        let ahead = |c: usize| (0..cells).filter(|&o| mask[o] && (p[o] > p[c] || (p[o] == p[c] && o < c))).count();
        let s_pred: Vec<usize> = (0..cells).filter(|&c| mask[c] && ahead(c) < s_true.len()).collect();
        assert_eq!(s_pred.len(), s_true.len());
        let inter = s_pred.iter().filter(|c| s_true.contains(c)).count();
        scores.push(inter as f64 / s_true.len() as f64);
    }
    (!scores.is_empty()).then(|| 100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn map_oracle(pred: &[f64], truth: &[f64], mask: &[bool]) -> Option<f64> {
    let cells = mask.len();
    let mut aps = Vec::new();
    for (p, t) in pred.chunks(cells).zip(truth.chunks(cells)) {
        let relevant: Vec<usize> = (0..cells).filter(|&c| mask[c] && t[c] > 0.0).collect();
        if relevant.is_empty() {
            continue;
        }
        let rank = |c: usize| 1 + (0..cells).filter(|&o| mask[o] && (p[o] > p[c] || (p[o] == p[c] && o < c))).count();
        let precision = |c: usize| {
            let r = rank(c);
            relevant.iter().filter(|&&o| rank(o) <= r).count() as f64 / r as f64
        };
        aps.push(relevant.iter().map(|&c| precision(c)).sum::<f64>() / relevant.len() as f64);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn rmse_oracle(pred: &[f64], truth: &[f64], mask: &[bool]) -> f64 {
    let sq: Vec<f64> = (0..pred.len())
        .filter(|k| mask[k % mask.len()])
        .map(|k| (pred[k] - truth[k]).powi(2))
        .collect();
    (sq.iter().sum::<f64>() / sq.len() as f64).sqrt()
}

pub fn instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cells = r.random_range(1..=25);
    let steps = r.random_range(1..=10);
    let mut mask: Vec<bool> = (0..cells).map(|_| r.random_bool(0.7)).collect();
    mask[r.random_range(0..cells)] = true;
    // Small integer predictions force ties.
    let pred = (0..cells * steps).map(|_| r.random_range(0..4) as f64).collect();
    let truth = (0..cells * steps).map(|_| if r.random_bool(0.3) { r.random_range(1..4) as f64 } else { 0.0 }).collect();
    (pred, truth, mask)
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-10,
        (None, None) => true,
        _ => false,
    }
}

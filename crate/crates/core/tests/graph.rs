mod common;

use common::{random_symmetric, rng};
use crossrisk::graph::*;
use crossrisk::tensor::ops;
use crossrisk::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn normalize_two_node_path() {
    let a = Tensor::new(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
    let y = normalize_support_with(&a, 0.0).unwrap();
    assert_eq!(y.data(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn normalize_triangle_halves() {
    let a = Tensor::from_fn(&[3, 3], |k| if k / 3 == k % 3 { 0.0 } else { 1.0 });
    let y = normalize_support_with(&a, 0.0).unwrap();
    assert!(y.max_abs_diff(&a.map(|v| v / 2.0)) < 1e-15);
}

#[test]
fn normalize_matches_direct_formula() {
    let a = random_symmetric(5, &mut rng(21));
    let y = normalize_support(&a).unwrap();
    let with_loops = Tensor::from_fn(&[5, 5], |k| a.data()[k] + if k / 5 == k % 5 { SELF_LOOP } else { 0.0 });
    let deg: Vec<f64> = (0..5).map(|i| (0..5).map(|j| with_loops.get(&[i, j])).sum()).collect();
    for i in 0..5 {
        for j in 0..5 {
            let expect = with_loops.get(&[i, j]) / (deg[i] * deg[j]).sqrt();
            assert!((y.get(&[i, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn normalize_keeps_isolated_nodes_finite() {
    let y = normalize_support(&Tensor::zeros(&[3, 3])).unwrap();
    assert_eq!(y, Tensor::eye(3));
}

#[test]
fn normalize_rejects_bad_input() {
    let asym = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.0]).unwrap();
    assert!(normalize_support(&asym).unwrap_err().to_string().contains("asymmetric"));
    let neg = Tensor::new(vec![2, 2], vec![0.0, -1.0, -1.0, 0.0]).unwrap();
    assert!(normalize_support(&neg).unwrap_err().to_string().contains("negative"));
}

#[test]
fn normalize_is_idempotent_on_unit_degree_input() {
    // Symmetric doubly stochastic: all degrees are 1.
    let a = Tensor::new(vec![3, 3], vec![0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5]).unwrap();
    let y = normalize_support_with(&a, 0.0).unwrap();
    assert!(y.max_abs_diff(&a) < 1e-12);
}

#[test]
fn adaptive_uniform_from_zero_embeddings() {
    let z = Tensor::zeros(&[4, 2]);
    let a = adaptive_adjacency(&z, &z).unwrap();
    assert!(a.data().iter().all(|&v| v == 0.25));
}

#[test]
fn adaptive_matches_composition() {
    let mut r = rng(4);
    let e1 = Tensor::randn(&[5, 2], &mut r);
    let e2 = Tensor::randn(&[5, 2], &mut r);
    let a = adaptive_adjacency(&e1, &e2).unwrap();
    for i in 0..5 {
        let logits: Vec<f64> = (0..5)
            .map(|j| (e1.get(&[i, 0]) * e2.get(&[j, 0]) + e1.get(&[i, 1]) * e2.get(&[j, 1])).max(0.0))
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..5 {
            assert!((a.get(&[i, j]) - logits[j].exp() / z).abs() < 1e-12);
        }
    }
}

#[test]
fn adaptive_rejects_mismatched_rank() {
    assert!(adaptive_adjacency(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 1])).is_err());
}

fn reconstruct(e1: &Tensor, e2: &Tensor) -> Tensor {
    ops::matmul(e1, &e2.transpose().unwrap()).unwrap()
}

#[test]
fn svd_init_reconstructs() {
    let (e1, e2) = init_adaptive_embeddings(&Tensor::eye(3), 3).unwrap();
    assert!(reconstruct(&e1, &e2).max_abs_diff(&Tensor::eye(3)) < 1e-9);

    let mut r = rng(9);
    let a = random_symmetric(6, &mut r);
    let (e1, e2) = init_adaptive_embeddings(&a, 6).unwrap();
    assert!(ops::sub(&reconstruct(&e1, &e2), &a).unwrap().norm() < 1e-8);

    let u = Tensor::uniform(&[5, 1], 0.1, 1.0, &mut r);
    let uut = ops::matmul(&u, &u.transpose().unwrap()).unwrap();
    let (e1, e2) = init_adaptive_embeddings(&uut, 1).unwrap();
    assert!(reconstruct(&e1, &e2).max_abs_diff(&uut) < 1e-8);
}

#[test]
fn svd_truncation_error_is_the_discarded_spectrum() {
    // For a symmetric matrix the singular values are the absolute
    // eigenvalues; the optimal rank-r error is the norm of the tail.
    let a = random_symmetric(5, &mut rng(31));
    let mut sv: Vec<f64> = DMatrix::from_row_slice(5, 5, a.data())
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    for r in 1..=5 {
        let (e1, e2) = init_adaptive_embeddings(&a, r).unwrap();
        let err = ops::sub(&reconstruct(&e1, &e2), &a).unwrap().norm();
        let tail = sv[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-9, "r={r}: {err} vs {tail}");
    }
}

#[test]
fn svd_rank_out_of_range() {
    assert!(init_adaptive_embeddings(&Tensor::eye(3), 0).is_err());
    assert!(init_adaptive_embeddings(&Tensor::eye(3), 4).is_err());
}

fn city(n: usize, seed: u64) -> SupportSet {
    let mut r = rng(seed);
    SupportSet::new(random_symmetric(n, &mut r), random_symmetric(n, &mut r), None, None).unwrap()
}

#[test]
fn default_rank_is_capped() {
    assert_eq!(default_rank(3), 3);
    assert_eq!(default_rank(20), 8);
    assert_eq!(city(5, 1).adaptive_init()[0].0.shape(), &[5, 5]);
}

#[test]
fn block_diagonal_single_city_is_identity() {
    let s = city(3, 1);
    let b = block_diagonal(std::slice::from_ref(&s)).unwrap();
    assert_eq!(b.road, s.road);
    assert_eq!(b.normalized(), s.normalized());
    assert_eq!(b.materialize().unwrap(), s.materialize().unwrap());
}

#[test]
fn block_diagonal_zero_off_blocks() {
    let b = block_diagonal(&[city(2, 1), city(3, 2)]).unwrap();
    assert_eq!(b.n(), 5);
    assert_eq!(b.blocks(), &[2, 3]);
    let mask = block_mask(&[2, 3]);
    for s in b.materialize().unwrap().iter().chain([&b.road, &b.risk, &b.poi]) {
        assert_eq!(s.shape(), &[5, 5]);
        for (k, &v) in s.data().iter().enumerate() {
            if !mask[k] {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn block_diagonal_spectrum_is_union() {
    let (c1, c2) = (city(3, 5), city(4, 6));
    let b = block_diagonal(&[c1.clone(), c2.clone()]).unwrap();
    let eig = |x: &Tensor| {
        let n = x.shape()[0];
        let mut e: Vec<f64> = DMatrix::from_row_slice(n, n, x.data())
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        e.sort_by(f64::total_cmp);
        e
    };
    let mut union = eig(&c1.normalized()[0]);
    union.extend(eig(&c2.normalized()[0]));
    union.sort_by(f64::total_cmp);
    let composed = eig(&b.normalized()[0]);
    assert_eq!(union.len(), composed.len());
    for (x, y) in union.iter().zip(&composed) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn missing_poi_becomes_identity() {
    let s = city(4, 3);
    assert_eq!(s.poi, Tensor::eye(4));
    let all = s.materialize().unwrap();
    assert_eq!(all.len(), 4);
    assert_eq!(all[2], Tensor::eye(4));
}

#[test]
fn mismatched_relations_rejected() {
    let mut r = rng(2);
    let err = SupportSet::new(random_symmetric(3, &mut r), random_symmetric(4, &mut r), None, None);
    assert!(err.is_err());
}

#[test]
fn grid_map_examples() {
    let m = build_grid_node_map(&[0], 1, 1, 1).unwrap();
    assert_eq!(m.matrix.data(), &[1.0]);
    let m = build_grid_node_map(&[1, 1], 2, 1, 2).unwrap();
    assert_eq!(m.matrix.data(), &[0.0, 0.0, 0.5, 0.5]);
    assert!(build_grid_node_map(&[2], 2, 1, 1).unwrap_err().to_string().contains("cell 2"));
    assert!(build_grid_node_map(&[0], 2, 1, 2).unwrap_err().to_string().contains("not assigned"));
}

#[test]
fn grid_map_round_trips_through_matrix() {
    let m = build_grid_node_map(&[3, 0, 3, 1], 2, 2, 4).unwrap();
    assert_eq!(GridNodeMap::from_matrix(m.matrix.clone(), 2, 2).unwrap(), m);
}

proptest! {
    #[test]
    fn grid_map_rows_sum_to_zero_or_one(assign in prop::collection::vec(0usize..12, 1..20)) {
        let n = assign.len();
        let m = build_grid_node_map(&assign, 3, 4, n).unwrap();
        let rows = ops::matmul(&m.matrix, &Tensor::ones(&[n, 1])).unwrap();
        for (cell, &s) in rows.data().iter().enumerate() {
            let ok = if assign.contains(&cell) { (s - 1.0).abs() < 1e-12 } else { s == 0.0 };
            prop_assert!(ok, "cell {} sums to {}", cell, s);
        }
        for node in 0..n {
            prop_assert!((0..12).any(|c| m.matrix.get(&[c, node]) > 0.0));
        }
    }

    #[test]
    fn adaptive_rows_are_stochastic(n in 1usize..7, r in 1usize..4, seed in any::<u64>()) {
        let mut g = rng(seed);
        let e1 = Tensor::randn(&[n, r], &mut g).map(|v| v * 3.0);
        let e2 = Tensor::randn(&[n, r], &mut g).map(|v| v * 3.0);
        let a = adaptive_adjacency(&e1, &e2).unwrap();
        for i in 0..n {
            let row = &a.data()[i * n..(i + 1) * n];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn normalized_supports_are_symmetric(n in 1usize..8, seed in any::<u64>()) {
        let s = city(n, seed);
        for a in s.normalized() {
            prop_assert!(a.max_abs_diff(&a.transpose().unwrap()) == 0.0);
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#![allow(dead_code)]

pub mod oracles;

use crossrisk::data::{F_GEO, F_SEM};
use crossrisk::graph::{build_grid_node_map, GridNodeMap, SupportSet};
use crossrisk::model::{CityInput, Model, ModelConfig};
use crossrisk::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Nonnegative symmetric matrix with entries in `[0, 1)`.
pub fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let u = Tensor::uniform(&[n, n], 0.0, 1.0, rng);
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        u.get(&[i.min(j), i.max(j)])
    })
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum()
    })
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||fd - g|| / max(||fd||, ||g||)`, or the absolute difference when both
/// gradients are below `1e-7`.
pub fn normwise_error(fd: &[f64], g: &[f64]) -> f64 {
    let diff: Vec<f64> = fd.iter().zip(g).map(|(a, b)| a - b).collect();
    let scale = norm(fd).max(norm(g));
    if scale < 1e-7 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of a scalar function of `inputs` at one entry.
pub fn central_difference(inputs: &[Tensor], which: usize, k: usize, h: f64, f: &impl Fn(&[Tensor]) -> f64) -> f64 {
    let mut plus = inputs.to_vec();
    let mut minus = inputs.to_vec();
    let bump = |t: &Tensor, d: f64| {
        let mut data = t.data().to_vec();
        data[k] += d;
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    plus[which] = bump(&inputs[which], h);
    minus[which] = bump(&inputs[which], -h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compares tape gradients with central differences (step `1e-5`) for the
/// scalar `sum(build(x) * r)`, `r` a fixed random weight. Returns the
/// normwise relative error per input.
pub fn gradient_errors(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Vec<f64> {
    let weight = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        Tensor::randn(tape.shape(out), &mut rng(0xfeed))
    };
    let scalar = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out)
            .data()
            .iter()
            .zip(weight.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let r = tape.constant(weight.clone());
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    inputs
        .iter()
        .enumerate()
        .map(|(which, x)| {
            let g = grads.get(vars[which]).unwrap();
            assert_eq!(g.shape(), x.shape());
            let fd: Vec<f64> = (0..x.numel())
                .map(|k| central_difference(inputs, which, k, 1e-5, &scalar))
                .collect();
            normwise_error(&fd, g.data())
        })
        .collect()
}

/// Small synthetic city for model-level tests.
#[derive(Clone, Debug)]
pub struct ToyCity {
    pub name: String,
    pub x_geo: Tensor,
    pub x_sem: Tensor,
    pub supports: SupportSet,
    pub map: GridNodeMap,
    pub mask: Vec<bool>,
    pub truth: Tensor,
}

impl ToyCity {
    pub fn input(&self) -> CityInput<'_> {
        CityInput {
            name: &self.name,
            x_geo: &self.x_geo,
            x_sem: &self.x_sem,
            supports: &self.supports,
            map: &self.map,
            mask: &self.mask,
        }
    }

    pub fn w(&self) -> usize {
        self.map.w
    }

    pub fn h(&self) -> usize {
        self.map.h
    }
}

pub fn toy_city(name: &str, w: usize, h: usize, n: usize, steps: usize, seed: u64) -> ToyCity {
    let mut r = rng(seed);
    let cells = w * h;
    let mut assign: Vec<usize> = (0..n).map(|_| r.random_range(0..cells)).collect();
    // Every node maps to a cell; make sure the map is not degenerate.
    assign[0] = 0;
    let map = build_grid_node_map(&assign, w, h, n).unwrap();
    let supports = SupportSet::new(
        random_symmetric(n, &mut r),
        random_symmetric(n, &mut r),
        Some(random_symmetric(n, &mut r)),
        None,
    )
    .unwrap();
    let mut mask: Vec<bool> = (0..cells).map(|_| r.random_bool(0.7)).collect();
    mask[0] = true;
    ToyCity {
        name: name.to_string(),
        x_geo: Tensor::randn(&[steps, cells, F_GEO], &mut r),
        x_sem: Tensor::randn(&[steps, n, F_SEM], &mut r),
        supports,
        map,
        mask,
        truth: Tensor::uniform(&[w, h], 0.0, 3.0, &mut r),
    }
}

pub fn toy_config(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        heads: 2,
        window: 2,
        ..ModelConfig::default()
    }
}

/// A model over `cities` whose parameters are all redrawn at random, so
/// that no gradient vanishes by construction.
pub fn toy_model(config: ModelConfig, cities: &[ToyCity], seed: u64) -> Model {
    let pairs: Vec<(&str, &SupportSet)> = cities.iter().map(|c| (c.name.as_str(), &c.supports)).collect();
    let mut model = Model::new(config, &pairs, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let shape = model.store.get(id).shape().to_vec();
        let value = if name.ends_with("a_log") {
            Tensor::uniform(&shape, -1.0, -0.1, &mut r)
        } else if name.ends_with("delta_t") {
            Tensor::uniform(&shape, 0.5, 1.5, &mut r)
        } else if name.ends_with("gamma") {
            Tensor::uniform(&shape, 0.5, 1.5, &mut r)
        } else {
            Tensor::randn(&shape, &mut r).map(|v| 0.5 * v)
        };
        model.store.set(id, value).unwrap();
    }
    model
}

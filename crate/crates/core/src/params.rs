//! Named parameter storage.
//!
//! Layer parameter structs are generic over a handle type: [`ParamId`] while
//! the model is at rest (pointing into a [`ParamStore`]), and [`Var`] once a
//! store has been bound to a tape for a forward pass.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered registry of learnable tensors, addressable by dotted path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under `name`. Panics on duplicate names: a layout that
    /// registers the same path twice is a programming error.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: old.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a learnable leaf; the result is indexed by
    /// `ParamId.0`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

/// Fan-in scaled normal initializer.
pub(crate) fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Dense layer `x W + b` applied along the last axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear<H> {
    pub weight: H,
    pub bias: H,
}

impl<H: Copy> Linear<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> Linear<U> {
        Linear {
            weight: f(self.weight),
            bias: f(self.bias),
        }
    }
}

impl Linear<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.register(format!("{path}.weight"), init_weight(&[d_in, d_out], d_in, rng)),
            bias: store.register(format!("{path}.bias"), Tensor::zeros(&[d_out])),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Two 1x1 projections with a ReLU between them, applied per position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointwiseMlp<H> {
    pub first: Linear<H>,
    pub second: Linear<H>,
}

impl<H: Copy> PointwiseMlp<H> {
    pub fn map<U>(&self, f: &mut impl FnMut(H) -> U) -> PointwiseMlp<U> {
        PointwiseMlp {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }
}

impl PointwiseMlp<ParamId> {
    pub(crate) fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        PointwiseMlp {
            first: Linear::register(store, &format!("{path}.0"), dims.0, dims.1, rng),
            second: Linear::register(store, &format!("{path}.1"), dims.1, dims.2, rng),
        }
    }
}

impl PointwiseMlp<Var> {
    /// Applies the MLP to the last axis of `x` (any leading shape).
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, h)
    }
}

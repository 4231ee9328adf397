//! Parameter storage and the few layer types the toy networks are built from.

use crate::rng::Rng;
use crate::tensor::{Graph, Real, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace the value of `name`; shapes must agree.
    pub fn set(&mut self, name: &str, value: Tensor) -> std::result::Result<(), String> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            ));
        }
        self.tensors[i] = value;
        Ok(())
    }

    /// Put every parameter on `g`, as trainable leaves or frozen constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.cast::<T>(), trainable))
                .collect(),
        )
    }

    /// Gradients of all parameters after `g.backward`, zero where none flowed.
    pub fn grads<T: Real>(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|&v| g.grad_or_zeros(v).cast::<f32>()).collect()
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// `k×k` kernel with "same" padding when `stride == 1`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.add(format!("{name}.weight"), init_uniform(&[cout, cin, k, k], fan_in, rng));
        let b = store.add(format!("{name}.bias"), init_uniform(&[cout], fan_in, rng));
        Self { w, b, stride, pad: k / 2 }
    }

    /// Same as [`Conv2d::new`] with an all-zero initialization.
    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.var(self.w), self.stride, self.pad)?;
        g.bias_add(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(&[din, dout], din, rng));
        let b = store.add(format!("{name}.bias"), init_uniform(&[dout], din, rng));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.bias_add(y, p.var(self.b))
    }
}

/// Lookup table of learned vectors.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add(format!("{name}.table"), rng.normal_tensor(&[rows, dim]).map(|v| 0.5 * v));
        Self { table }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, ids: &[usize]) -> Result<Var> {
        g.gather(p.var(self.table), ids)
    }
}

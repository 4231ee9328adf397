use super::kernels::{self, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the engine supports.
///
/// Broadcasting is deliberately narrow: `BiasAdd` adds a `[C]` vector along
/// axis 1 of an `[N, C, ...]` tensor, `ChannelAdd` adds an `[N, C]` matrix
/// over the trailing axes of an `[N, C, ...]` tensor. Everything else is
/// shape-exact.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Silu,
    Tanh,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    MseLoss,
    Scale(f64),
    BiasAdd,
    ChannelAdd,
    Upsample2x,
    AvgPool(usize),
    Sum,
    Clamp { lo: f64, hi: f64 },
    Gather(Vec<usize>),
    CrossEntropy(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Silu => "silu",
            OpKind::Tanh => "tanh",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::MseLoss => "mse_loss",
            OpKind::Scale(_) => "scale",
            OpKind::BiasAdd => "bias_add",
            OpKind::ChannelAdd => "channel_add",
            OpKind::Upsample2x => "upsample2x",
            OpKind::AvgPool(_) => "avg_pool",
            OpKind::Sum => "sum",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Gather(_) => "gather",
            OpKind::CrossEntropy(_) => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    /// `None` for leaves and for results that do not depend on any trainable leaf.
    op: Option<OpKind>,
    inputs: Vec<Var>,
    saved: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A tape of tensor operations. Nodes are appended in execution order, so the
/// tape is topologically sorted by construction and backward walks it in
/// reverse.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Vec::new(),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any flowed here.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Like [`Graph::grad`] but zero-filled when nothing reached `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Record `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::Conv2d { .. }
            | OpKind::MseLoss
            | OpKind::BiasAdd
            | OpKind::ChannelAdd => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if inputs.len() != a {
                return Err(TensorError::Invalid(format!(
                    "{} takes {a} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Invalid(format!("{} needs inputs", kind.name())));
        }
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&kind, &vals)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                op: Some(kind),
                inputs: inputs.to_vec(),
                saved,
                requires_grad,
                grad: None,
            }
        } else {
            Node {
                value,
                op: None,
                inputs: Vec::new(),
                saved: Vec::new(),
                requires_grad,
                grad: None,
            }
        };
        self.nodes.push(node);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(OpKind::Conv2d { stride, pad }, &[x, w])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Silu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[x])
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MseLoss, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[x])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::BiasAdd, &[x, bias])
    }

    pub fn channel_add(&mut self, x: Var, per_sample: Var) -> Result<Var> {
        self.apply(OpKind::ChannelAdd, &[x, per_sample])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Upsample2x, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(OpKind::AvgPool(k), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(OpKind::Gather(ids.to_vec()), &[table])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(OpKind::CrossEntropy(labels.to_vec()), &[logits])
    }

    /// Squared L2 distance `‖a − b‖²` as a scalar.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        let m = self.mse_loss(a, b)?;
        self.scale(m, n as f64)
    }

    /// Populate `grad` of every node on a path from a trainable leaf to `root`
    /// with `∂root/∂node`. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(TensorError::NotScalar(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::RootWithoutGrad);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(kind) = self.nodes[i].op.as_ref() else {
                continue;
            };
            let Some(gout) = self.nodes[i].grad.as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let vals: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let contribs = backward_op(kind, &vals, &node.value, &node.saved, gout, &need);
            let inputs = node.inputs.clone();
            for (v, c) in inputs.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                let target = &mut self.nodes[v.0];
                match target.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    None => target.grad = Some(c),
                }
            }
        }
        Ok(())
    }
}

fn forward<T: Real>(kind: &OpKind, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let name = kind.name();
    let out = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(name, &[a.shape(), b.shape()]));
            }
            let f: fn(T, T) -> T = match kind {
                OpKind::Add => |p, q| p + q,
                OpKind::Sub => |p, q| p - q,
                _ => |p, q| p * q,
            };
            a.zip_map(b, f)?
        }
        OpKind::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch(name, &[sa, sb]));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![T::zero(); m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut out);
            Tensor::new(vec![m, n], out)?
        }
        OpKind::Conv2d { stride, pad } => {
            let (inp, w) = (x[0], x[1]);
            let (si, sw) = (inp.shape(), w.shape());
            if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
                return Err(mismatch(name, &[si, sw]));
            }
            let geom = ConvGeom::new(si[1], si[2], si[3], sw[2], sw[3], *stride, *pad)
                .ok_or_else(|| mismatch(name, &[si, sw]))?;
            let (batch, cout) = (si[0], sw[0]);
            let mut out = vec![T::zero(); batch * cout * geom.out_area()];
            kernels::conv2d_forward(&geom, batch, cout, inp.data(), w.data(), &mut out);
            Tensor::new(vec![batch, cout, geom.ho, geom.wo], out)?
        }
        OpKind::Silu => x[0].map(|v| v * sigmoid(v)),
        OpKind::Tanh => x[0].map(|v| v.tanh()),
        OpKind::Reshape(shape) => x[0].clone().reshape(shape)?,
        OpKind::Concat { axis } => {
            let first = x[0].shape();
            if *axis >= first.len() {
                return Err(mismatch(name, &[first]));
            }
            let mut total = 0;
            for t in x {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(d, (p, q))| d == *axis || p == q);
                if !compatible {
                    return Err(mismatch(name, &x.iter().map(|t| t.shape()).collect::<Vec<_>>()));
                }
                total += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in x {
                    let chunk = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Tensor::new(shape, data)?
        }
        OpKind::Slice { axis, start, end } => {
            let s = x[0].shape();
            if *axis >= s.len() || start >= end || *end > s[*axis] {
                return Err(TensorError::Invalid(format!(
                    "slice {start}..{end} on axis {axis} of shape {s:?}"
                )));
            }
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let len = s[*axis];
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x[0].data()[base + start * inner..base + end * inner]);
            }
            let mut shape = s.to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, data)?
        }
        OpKind::MseLoss => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() || a.is_empty() {
                return Err(mismatch(name, &[a.shape(), b.shape()]));
            }
            let s: T = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            Tensor::scalar(s / T::from_usize(a.len()).unwrap())
        }
        OpKind::Scale(f) => {
            let f = T::lit(*f);
            x[0].map(|v| v * f)
        }
        OpKind::BiasAdd => {
            let (a, b) = (x[0], x[1]);
            let s = a.shape();
            if s.len() < 2 || b.shape() != [s[1]] {
                return Err(mismatch(name, &[s, b.shape()]));
            }
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[(i / inner) % c];
            }
            out
        }
        OpKind::ChannelAdd => {
            let (a, e) = (x[0], x[1]);
            let s = a.shape();
            if s.len() < 2 || e.shape() != &s[..2] {
                return Err(mismatch(name, &[s, e.shape()]));
            }
            let inner: usize = s[2..].iter().product();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += e.data()[i / inner];
            }
            out
        }
        OpKind::Upsample2x => {
            let s = x[0].shape();
            if s.len() != 4 {
                return Err(mismatch(name, &[s]));
            }
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let src = x[0].data();
            let mut data = vec![T::zero(); nc * 4 * h * w];
            for p in 0..nc {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        data[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data)?
        }
        OpKind::AvgPool(k) => {
            let s = x[0].shape();
            if s.len() != 4 || *k == 0 || !s[2].is_multiple_of(*k) || !s[3].is_multiple_of(*k) {
                return Err(mismatch(name, &[s]));
            }
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / k, w / k);
            let src = x[0].data();
            let norm = T::one() / T::from_usize(k * k).unwrap();
            let mut data = vec![T::zero(); nc * ho * wo];
            for p in 0..nc {
                for y in 0..h {
                    for xx in 0..w {
                        data[p * ho * wo + (y / k) * wo + xx / k] += src[p * h * w + y * w + xx] * norm;
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], ho, wo], data)?
        }
        OpKind::Sum => Tensor::scalar(x[0].sum()),
        OpKind::Clamp { lo, hi } => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            x[0].map(|v| v.max(lo).min(hi))
        }
        OpKind::Gather(ids) => {
            let s = x[0].shape();
            if s.len() != 2 || ids.iter().any(|&i| i >= s[0]) {
                return Err(TensorError::Invalid(format!(
                    "gather ids {ids:?} out of range for table {s:?}"
                )));
            }
            let d = s[1];
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                data.extend_from_slice(&x[0].data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)?
        }
        OpKind::CrossEntropy(labels) => {
            let s = x[0].shape();
            if s.len() != 2 || s[0] != labels.len() || s[0] == 0 || labels.iter().any(|&l| l >= s[1]) {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy labels {labels:?} incompatible with logits {s:?}"
                )));
            }
            let k = s[1];
            let mut probs = vec![T::zero(); s[0] * k];
            let mut loss = T::zero();
            for (r, &label) in labels.iter().enumerate() {
                let row = &x[0].data()[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                for (j, &v) in row.iter().enumerate() {
                    probs[r * k + j] = (v - max).exp() / z;
                }
                loss += z.ln() + max - row[label];
            }
            let n = T::from_usize(s[0]).unwrap();
            return Ok((Tensor::scalar(loss / n), probs));
        }
    };
    Ok((out, Vec::new()))
}

/// Vector-Jacobian products of `kind` for each input flagged in `need`.
fn backward_op<T: Real>(
    kind: &OpKind,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &[T],
    g: &[T],
    need: &[bool],
) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match kind {
        OpKind::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        OpKind::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|&v| -v).collect()),
        ],
        OpKind::Mul => vec![
            want(0).then(|| g.iter().zip(x[1].data()).map(|(&a, &b)| a * b).collect()),
            want(1).then(|| g.iter().zip(x[0].data()).map(|(&a, &b)| a * b).collect()),
        ],
        OpKind::MatMul => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = x[1].shape()[1];
            let da = want(0).then(|| {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, g, false, x[1].data(), true, T::zero(), &mut d);
                d
            });
            let db = want(1).then(|| {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, x[0].data(), true, g, false, T::zero(), &mut d);
                d
            });
            vec![da, db]
        }
        OpKind::Conv2d { stride, pad } => {
            let (si, sw) = (x[0].shape(), x[1].shape());
            let geom = ConvGeom::new(si[1], si[2], si[3], sw[2], sw[3], *stride, *pad)
                .expect("validated in forward");
            let mut gi = want(0).then(|| vec![T::zero(); x[0].len()]);
            let mut gw = want(1).then(|| vec![T::zero(); x[1].len()]);
            kernels::conv2d_backward(
                &geom,
                si[0],
                sw[0],
                x[0].data(),
                x[1].data(),
                g,
                gw.as_deref_mut(),
                gi.as_deref_mut(),
            );
            vec![gi, gw]
        }
        OpKind::Silu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (T::one() + v * (T::one() - s))
                })
                .collect(),
        )],
        OpKind::Tanh => vec![Some(
            out.data()
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * (T::one() - y * y))
                .collect(),
        )],
        OpKind::Reshape(_) | OpKind::Scale(_) => {
            let f = match kind {
                OpKind::Scale(f) => T::lit(*f),
                _ => T::one(),
            };
            vec![Some(g.iter().map(|&v| v * f).collect())]
        }
        OpKind::Concat { axis } => {
            let first = x[0].shape();
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[*axis + 1..].iter().product();
            let total = out.shape()[*axis];
            let mut offset = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let len = t.shape()[*axis];
                    let res = want(i).then(|| {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        d
                    });
                    offset += len;
                    res
                })
                .collect()
        }
        OpKind::Slice { axis, start, end } => {
            let s = x[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[*axis + 1..].iter().product();
            let len = s[*axis];
            let width = (end - start) * inner;
            let mut d = vec![T::zero(); x[0].len()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                d[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(d)]
        }
        OpKind::MseLoss => {
            let n = T::from_usize(x[0].len()).unwrap();
            let c = g[0] * T::lit(2.0) / n;
            let diff: Vec<T> = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| (a - b) * c).collect();
            vec![
                want(0).then(|| diff.clone()),
                want(1).then(|| diff.iter().map(|&v| -v).collect()),
            ]
        }
        OpKind::BiasAdd => {
            let s = x[0].shape();
            let c = s[1];
            let inner: usize = s[2..].iter().product();
            let db = want(1).then(|| {
                let mut d = vec![T::zero(); c];
                for (i, &gv) in g.iter().enumerate() {
                    d[(i / inner) % c] += gv;
                }
                d
            });
            vec![want(0).then(|| g.to_vec()), db]
        }
        OpKind::ChannelAdd => {
            let s = x[0].shape();
            let inner: usize = s[2..].iter().product();
            let de = want(1).then(|| {
                let mut d = vec![T::zero(); s[0] * s[1]];
                for (i, &gv) in g.iter().enumerate() {
                    d[i / inner] += gv;
                }
                d
            });
            vec![want(0).then(|| g.to_vec()), de]
        }
        OpKind::Upsample2x => {
            let s = x[0].shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut d = vec![T::zero(); x[0].len()];
            for p in 0..nc {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        d[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                    }
                }
            }
            vec![Some(d)]
        }
        OpKind::AvgPool(k) => {
            let s = x[0].shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / k, w / k);
            let norm = T::one() / T::from_usize(k * k).unwrap();
            let mut d = vec![T::zero(); x[0].len()];
            for p in 0..nc {
                for y in 0..h {
                    for xx in 0..w {
                        d[p * h * w + y * w + xx] = g[p * ho * wo + (y / k) * wo + xx / k] * norm;
                    }
                }
            }
            vec![Some(d)]
        }
        OpKind::Sum => vec![Some(vec![g[0]; x[0].len()])],
        OpKind::Clamp { lo, hi } => {
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            vec![Some(
                x[0].data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= lo && v <= hi { gv } else { T::zero() })
                    .collect(),
            )]
        }
        OpKind::Gather(ids) => {
            let d = x[0].shape()[1];
            let mut out = vec![T::zero(); x[0].len()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    out[i * d + j] += g[r * d + j];
                }
            }
            vec![Some(out)]
        }
        OpKind::CrossEntropy(labels) => {
            let k = x[0].shape()[1];
            let scale = g[0] / T::from_usize(labels.len()).unwrap();
            let mut d: Vec<T> = saved.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                d[r * k + l] -= scale;
            }
            vec![Some(d)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let l = g.mse_loss(a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn silu_of_zero_is_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(0.0));
        let s = g.silu(a).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        // interior positions see the full 3×3 window, corners see 2×2
        assert_eq!(out.data()[5], 9.0);
        assert_eq!(out.data()[10], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }

    #[test]
    fn scalar_chain_derivative() {
        // d/dw (w·x − y)² at w=1, x=2, y=0 is 2·(2)·2 = 8
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::scalar(1.0), true);
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.constant(Tensor::scalar(0.0));
        let wx = g.mul(w, x).unwrap();
        let l = g.mse_loss(wx, y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 8.0);
    }

    #[test]
    fn independent_leaf_gets_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad_or_zeros(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_report_offending_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        match g.add(a, b) {
            Err(TensorError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(f32::MAX));
        assert_eq!(g.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" }));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::zeros(&[2]), true);
        let b = g.silu(a).unwrap();
        assert_eq!(g.backward(b), Err(TensorError::NotScalar(vec![2])));
        let c = g.constant(Tensor::scalar(1.0));
        assert_eq!(g.backward(c), Err(TensorError::RootWithoutGrad));
    }

    #[test]
    fn reused_node_accumulates() {
        // f = sum(a * a) → df/da = 2a
        let mut g = Graph::<f32>::new();
        let a = g.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let l = g.cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }
}

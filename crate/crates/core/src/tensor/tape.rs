//! Wengert-style tape: every forward op appends a node holding its output
//! and whatever the backward rule needs; [`Tape::backward`] walks the nodes
//! once in reverse.

use std::collections::HashMap;

use super::kernels;
use super::param::{Gradients, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Every differentiable op the tape records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Reshape,
    Transpose,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Reduce,
    Concat,
    Narrow,
    Gather,
    Bce,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Reduce,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Gather,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Reduce => "reduce",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Gather => "gather",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: usize, b: usize, inner: usize },
    Mul { a: usize, b: usize, inner: usize },
    Scale { x: usize, k: T },
    Reshape { x: usize },
    Transpose { x: usize, dims: [usize; 5] },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize, dims: [usize; 3] },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T>, d: usize },
    Reduce { x: usize, dims: [usize; 3], mean: bool },
    Concat { xs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Narrow { x: usize, dims: [usize; 3], start: usize, len: usize },
    Gather { table: usize, ids: Vec<usize>, d: usize },
    Bce { logits: usize, targets: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf { .. } => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Gather { .. } => OpKind::Gather,
            Op::Bce { .. } => OpKind::Bce,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded computation record. Build one per forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3(shape: &[usize], axis: usize) -> [usize; 3] {
    [
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// Deliberately corrupts the backward rule of `kind` (scales its
    /// upstream gradient by 1.5). Only for exercising the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free input whose gradient is reported through [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter (once per tape). Frozen parameters enter as
    /// constants and never accumulate gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                kernels::matmul_acc(av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::matmul_acc(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, batch, m, k, n, shared_b }, &[a.0, b.0]))
    }

    fn suffix_inner(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(self.value(b).numel())
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and
    /// is then repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.suffix_inner("add", a, b)?;
        let bv = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % inner])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0, inner }, &[a.0, b.0]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.suffix_inner("mul", a, b)?;
        let bv = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % inner])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0, inner }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let k = T::of(k);
        let data = self.value(x).data().iter().map(|&v| v * k).collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(value, Op::Scale { x: x.0, k }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        Ok(self.push(value, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis0 >= shape.len() || axis1 >= shape.len() || axis0 == axis1 {
            return Err(Error::Contract(format!(
                "transpose axes ({axis0}, {axis1}) invalid for shape {shape:?}"
            )));
        }
        let (lo, hi) = (axis0.min(axis1), axis0.max(axis1));
        let dims = kernels::swap_dims(&shape, lo, hi);
        let data = kernels::swap_axes(self.value(x).data(), dims);
        let mut out_shape = shape;
        out_shape.swap(lo, hi);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Transpose { x: x.0, dims }, &[x.0]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| T::of(kernels::gelu(v.f64()))).collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(value, Op::Gelu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| T::of(kernels::sigmoid(v.f64()))).collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push(value, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let dims = dims3(&shape, axis);
        let data = kernels::softmax(self.value(x).data(), dims[0], dims[1], dims[2]);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { x: x.0, dims }, &[x.0]))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            eps,
        );
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd, d },
            &[x.0, gain.0, bias.0],
        ))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("reduce axis {axis} out of range for {shape:?}")));
        }
        let dims = dims3(&shape, axis);
        let data = kernels::reduce(self.value(x).data(), dims[0], dims[1], dims[2], mean);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Reduce { x: x.0, dims, mean }, &[x.0]))
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(flat, 0, false)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &c) in xs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(x).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Op::Concat { xs: ids.clone(), outer, chunks }, &ids))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) invalid for shape {shape:?}"
            )));
        }
        let dims = dims3(&shape, axis);
        let [outer, n, inner] = dims;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Narrow { x: x.0, dims, start, len }, &[x.0]))
    }

    /// Row lookup into a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::Contract(format!("gather needs a [rows, d] table, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather index {bad} out of range {rows}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(value, Op::Gather { table: table.0, ids: ids.to_vec(), d }, &[table.0]))
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets`, in the
    /// stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(targets.data())
            .map(|(z, y)| kernels::bce_with_logit(z.f64(), y.f64()))
            .sum();
        let value = Tensor::scalar(T::of(total / n));
        Ok(self.push(
            value,
            Op::Bce { logits: logits.0, targets: targets.data().to_vec() },
            &[logits.0],
        ))
    }

    /// Reverse pass from a scalar `loss`. Only nodes that depend on a
    /// trainable parameter or a free leaf are visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault.is_some() && self.fault == self.nodes[i].op.kind() {
                let k = T::of(1.5);
                g.iter_mut().for_each(|v| *v *= k);
            }
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        index: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let nodes = &self.nodes;
        let node = &nodes[index];
        // Accumulates into the gradient buffer of input `$j` if it needs one.
        macro_rules! acc {
            ($j:expr, |$buf:ident| $body:block) => {{
                let j = $j;
                if nodes[j].requires_grad {
                    let len = nodes[j].value.numel();
                    let $buf: &mut Vec<T> = grads[j].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            }};
        }

        match &node.op {
            Op::Leaf { param } => {
                let t = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.to_vec(),
                };
                match param {
                    Some(id) => {
                        out.params.insert(*id, t);
                    }
                    None => {
                        out.leaves.insert(index, t);
                    }
                }
            }
            &Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                acc!(a, |da| {
                    if shared_b {
                        kernels::matmul_a_bt_acc(g, bv, da, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_a_bt_acc(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
                acc!(b, |db| {
                    if shared_b {
                        kernels::matmul_at_b_acc(av, g, db, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_at_b_acc(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            &Op::Add { a, b, inner } => {
                acc!(a, |da| {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                });
                acc!(b, |db| {
                    for (i, &v) in g.iter().enumerate() {
                        db[i % inner] += v;
                    }
                });
            }
            &Op::Mul { a, b, inner } => {
                let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
                acc!(a, |da| {
                    for (i, (d, &v)) in da.iter_mut().zip(g).enumerate() {
                        *d += v * bv[i % inner];
                    }
                });
                acc!(b, |db| {
                    for (i, &v) in g.iter().enumerate() {
                        db[i % inner] += v * av[i];
                    }
                });
            }
            &Op::Scale { x, k } => acc!(x, |dx| {
                for (d, &v) in dx.iter_mut().zip(g) {
                    *d += v * k;
                }
            }),
            &Op::Reshape { x } => acc!(x, |dx| {
                for (d, &v) in dx.iter_mut().zip(g) {
                    *d += v;
                }
            }),
            &Op::Transpose { x, dims } => acc!(x, |dx| {
                let [outer, da, mid, db, inner] = dims;
                let back = kernels::swap_axes(g, [outer, db, mid, da, inner]);
                for (d, v) in dx.iter_mut().zip(back) {
                    *d += v;
                }
            }),
            &Op::Gelu { x } => {
                let xv = nodes[x].value.data();
                acc!(x, |dx| {
                    for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += v * T::of(kernels::gelu_grad(xi.f64()));
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                acc!(x, |dx| {
                    for ((d, &v), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += v * yi * (T::one() - yi);
                    }
                });
            }
            &Op::Softmax { x, dims } => {
                let y = node.value.data();
                acc!(x, |dx| { kernels::softmax_backward(y, g, dx, dims[0], dims[1], dims[2]) });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd, d } => {
                let gv = nodes[*gain].value.data();
                acc!(*x, |dx| {
                    kernels::layer_norm_backward(g, xhat, rstd, gv, *d, Some(dx), None, None)
                });
                acc!(*gain, |dg| {
                    kernels::layer_norm_backward(g, xhat, rstd, gv, *d, None, Some(dg), None)
                });
                acc!(*bias, |db| {
                    kernels::layer_norm_backward(g, xhat, rstd, gv, *d, None, None, Some(db))
                });
            }
            &Op::Reduce { x, dims, mean } => acc!(x, |dx| {
                let [outer, n, inner] = dims;
                let scale = if mean { T::of(1.0 / n as f64) } else { T::one() };
                for o in 0..outer {
                    for i in 0..n {
                        for r in 0..inner {
                            dx[(o * n + i) * inner + r] += g[o * inner + r] * scale;
                        }
                    }
                }
            }),
            Op::Concat { xs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&x, &c) in xs.iter().zip(chunks) {
                    acc!(x, |dx| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            for (d, &v) in dx[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                    offset += c;
                }
            }
            &Op::Narrow { x, dims, start, len } => acc!(x, |dx| {
                let [outer, n, inner] = dims;
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &v) in dx[to..to + len * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }),
            Op::Gather { table, ids, d } => acc!(*table, |dt| {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..*d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
            }),
            Op::Bce { logits, targets } => {
                let z = nodes[*logits].value.data();
                let scale = g[0].f64() / z.len() as f64;
                acc!(*logits, |dz| {
                    for ((d, &zi), &yi) in dz.iter_mut().zip(z).zip(targets) {
                        *d += T::of((kernels::sigmoid(zi.f64()) - yi.f64()) * scale);
                    }
                });
            }
        }
    }
}

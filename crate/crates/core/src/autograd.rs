//! Record-on-forward reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, and a node's parents always have smaller ids,
//! so walking ids downward from the loss is a valid reverse topological order.
//!
//! [`Tape::backward`] consumes the recorded graph: the nodes are dropped and
//! any `Var` created before the call becomes stale. Use
//! [`Tape::backward_retain`] to keep the graph for a second pass.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Real, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    Relu(usize),
    Tanh(usize),
    Transpose(usize),
    SoftmaxCols(usize),
    LayerNormCols(usize, T),
    CrossEntropy(usize, Vec<usize>),
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
    Mask(usize, Vec<T>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner<T: Real> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

/// The computation tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f64> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T: Real = f64> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f64> {
    generation: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&[T]> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`'s value.
    pub fn tensor(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.get(var)?;
        Tensor::from_vec(&self.shapes[var.id], g.to_vec()).ok()
    }

    /// Accumulates the gradient of `var` into `target.grad`.
    pub fn accumulate_into(&self, var: &Var<'_, T>, target: &mut Tensor<T>) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                generation: 0,
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Existing vars become stale.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// Records a leaf; tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.detach(), Op::Leaf, tensor.requires_grad())
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push(tensor.detach(), Op::Leaf, true)
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn scalar_param(&self, value: T) -> Var<'_, T> {
        self.push(Tensor::scalar(value), Op::Leaf, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id,
            generation: inner.generation,
        }
    }

    fn check(&self, var: &Var<'_, T>) -> Result<()> {
        let inner = self.inner.borrow();
        if !std::ptr::eq(var.tape, self) {
            return Err(Error::state("variable belongs to a different tape"));
        }
        if var.generation != inner.generation || var.id >= inner.nodes.len() {
            return Err(Error::state(
                "variable refers to a detached tape; re-run the forward pass",
            ));
        }
        Ok(())
    }

    /// Back-propagates from a scalar loss and clears the tape.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let grads = self.backward_retain(loss)?;
        self.clear();
        Ok(grads)
    }

    /// Back-propagates from a scalar loss and keeps the recorded graph.
    pub fn backward_retain(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        self.check(loss)?;
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Intermediate grads are kept; callers normally only read leaves.
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            generation: inner.generation,
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn add_to<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, p) = val(*a).dims2();
            let (_, q) = val(*b).dims2();
            if nodes[*a].requires_grad {
                // dL/da = g * b^T
                let bt = val(*b).transpose();
                let mut ga = vec![T::zero(); m * p];
                matmul_into(g, bt.data(), &mut ga, m, q, p);
                add_to(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dL/db = a^T * g
                let at = val(*a).transpose();
                let mut gb = vec![T::zero(); p * q];
                matmul_into(at.data(), g, &mut gb, p, m, q);
                add_to(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            add_to(grads, nodes, *a, g.to_vec());
            add_to(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_to(grads, nodes, *a, g.to_vec());
            add_to(grads, nodes, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            add_to(grads, nodes, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            add_to(grads, nodes, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
        }
        Op::AddBias(x, bias) => {
            add_to(grads, nodes, *x, g.to_vec());
            let (r, c) = node.value.dims2();
            let gb = (0..r).map(|i| g[i * c..(i + 1) * c].iter().copied().sum()).collect();
            add_to(grads, nodes, *bias, gb);
        }
        Op::Scale(a, s) => add_to(grads, nodes, *a, g.iter().map(|&v| v * *s).collect()),
        Op::ScaleBy(a, s) => {
            let sv = val(*s).data()[0];
            add_to(grads, nodes, *a, g.iter().map(|&v| v * sv).collect());
            let gs = g.iter().zip(val(*a).data()).map(|(&g, &a)| g * a).sum();
            add_to(grads, nodes, *s, vec![gs]);
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            let ga = g
                .iter()
                .zip(av)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            add_to(grads, nodes, *a, ga);
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            let ga = g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
            add_to(grads, nodes, *a, ga);
        }
        Op::Transpose(a) => {
            let (r, c) = node.value.dims2();
            let gt = Tensor::from_vec(&[r, c], g.to_vec())
                .expect("grad shape")
                .transpose();
            add_to(grads, nodes, *a, gt.into_data());
        }
        Op::SoftmaxCols(a) => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut ga = vec![T::zero(); r * c];
            for j in 0..c {
                let dot: T = (0..r).map(|i| g[i * c + j] * y.data()[i * c + j]).sum();
                for i in 0..r {
                    ga[i * c + j] = y.data()[i * c + j] * (g[i * c + j] - dot);
                }
            }
            add_to(grads, nodes, *a, ga);
        }
        Op::LayerNormCols(a, eps) => {
            let x = val(*a);
            let (r, c) = x.dims2();
            let y = node.value.data();
            let n = T::from_f64(r as f64);
            let mut ga = vec![T::zero(); r * c];
            for j in 0..c {
                let mean: T = (0..r).map(|i| x.data()[i * c + j]).sum::<T>() / n;
                let var: T = (0..r)
                    .map(|i| {
                        let d = x.data()[i * c + j] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / n;
                let inv = T::one() / (var + *eps).sqrt();
                let g_mean: T = (0..r).map(|i| g[i * c + j]).sum::<T>() / n;
                let gy_mean: T = (0..r).map(|i| g[i * c + j] * y[i * c + j]).sum::<T>() / n;
                for i in 0..r {
                    ga[i * c + j] = inv * (g[i * c + j] - g_mean - y[i * c + j] * gy_mean);
                }
            }
            add_to(grads, nodes, *a, ga);
        }
        Op::CrossEntropy(logits, labels) => {
            let z = val(*logits);
            let (r, c) = z.dims2();
            let p = softmax_cols(z);
            let scale = g[0] / T::from_f64(c as f64);
            let mut gz = p.into_data();
            for (j, &label) in labels.iter().enumerate() {
                gz[label * c + j] -= T::one();
            }
            debug_assert_eq!(gz.len(), r * c);
            gz.iter_mut().for_each(|v| *v *= scale);
            add_to(grads, nodes, *logits, gz);
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let k = T::from_f64(2.0) * g[0] / T::from_f64(av.len() as f64);
            let ga: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
            add_to(grads, nodes, *b, ga.iter().map(|&v| -v).collect());
            add_to(grads, nodes, *a, ga);
        }
        Op::Sum(a) => add_to(grads, nodes, *a, vec![g[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            add_to(grads, nodes, *a, vec![g[0] / T::from_f64(n as f64); n]);
        }
        Op::Mask(a, mask) => {
            add_to(grads, nodes, *a, g.iter().zip(mask).map(|(&g, &m)| g * m).collect());
        }
        Op::SliceRows(a, start) => {
            let (ra, c) = val(*a).dims2();
            let mut ga = vec![T::zero(); ra * c];
            ga[start * c..start * c + g.len()].copy_from_slice(g);
            add_to(grads, nodes, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let (r, ca) = val(*a).dims2();
            let w = node.value.cols();
            let mut ga = vec![T::zero(); r * ca];
            for i in 0..r {
                ga[i * ca + start..i * ca + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            add_to(grads, nodes, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                add_to(grads, nodes, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, c) = node.value.dims2();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let mut gp = Vec::with_capacity(r * w);
                for i in 0..r {
                    gp.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                }
                add_to(grads, nodes, p, gp);
                offset += w;
            }
        }
        Op::Reshape(a) => add_to(grads, nodes, *a, g.to_vec()),
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_cols<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let (r, c) = z.dims2();
    let mut out = z.data().to_vec();
    for j in 0..c {
        let max = (0..r).map(|i| out[i * c + j]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for i in 0..r {
            let e = (out[i * c + j] - max).exp();
            out[i * c + j] = e;
            total += e;
        }
        for i in 0..r {
            out[i * c + j] = out[i * c + j] / total;
        }
    }
    Tensor::from_vec(z.shape(), out).expect("softmax keeps shape")
}

/// Mean over columns of `-log softmax(z)[label]`.
pub fn cross_entropy_value<T: Real>(z: &Tensor<T>, labels: &[usize]) -> T {
    let (r, c) = z.dims2();
    let mut total = T::zero();
    for (j, &label) in labels.iter().enumerate() {
        let max = (0..r).map(|i| z.at(i, j)).fold(T::neg_infinity(), T::max);
        let lse = (0..r).map(|i| (z.at(i, j) - max).exp()).sum::<T>().ln() + max;
        total += lse - z.at(label, j);
    }
    total / T::from_f64(c as f64)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.tape.inner.borrow().nodes[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(
        &self,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        let (out, rg) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (f(&n.value)?, n.requires_grad)
        };
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (out, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            (f(&a.value, &b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(out, op, rg))
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.hadamard(b))
    }

    /// Adds a `rows x 1` bias to every column.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(bias, Op::AddBias(self.id, bias.id), |x, b| {
            let (r, c) = x.dims2();
            if b.len() != r {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let mut out = x.data().to_vec();
            for i in 0..r {
                let bi = b.data()[i];
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += bi);
            }
            Tensor::from_vec(x.shape(), out)
        })
    }

    /// Multiplies by a constant.
    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.scale(s)))
    }

    /// Multiplies by a one-element var (differentiable in both).
    pub fn scale_by(&self, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(s, Op::ScaleBy(self.id, s.id), |a, s| {
            if s.len() != 1 {
                return Err(Error::dim("scale_by", a.shape(), s.shape()));
            }
            Ok(a.scale(s.data()[0]))
        })
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Relu(self.id), |a| Ok(a.map(|v| v.max(T::zero()))))
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Tanh(self.id), |a| Ok(a.map(T::tanh)))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Transpose(self.id), |a| Ok(a.transpose()))
    }

    /// Softmax over each column.
    pub fn softmax_cols(&self) -> Result<Var<'t, T>> {
        self.unary(Op::SoftmaxCols(self.id), |a| Ok(softmax_cols(a)))
    }

    /// Normalizes each column to zero mean and unit variance (no affine part).
    pub fn layer_norm_cols(&self, eps: T) -> Result<Var<'t, T>> {
        self.unary(Op::LayerNormCols(self.id, eps), |x| {
            let (r, c) = x.dims2();
            let n = T::from_f64(r as f64);
            let mut out = x.data().to_vec();
            for j in 0..c {
                let mean: T = (0..r).map(|i| out[i * c + j]).sum::<T>() / n;
                let var: T = (0..r)
                    .map(|i| (out[i * c + j] - mean) * (out[i * c + j] - mean))
                    .sum::<T>()
                    / n;
                let inv = T::one() / (var + eps).sqrt();
                for i in 0..r {
                    out[i * c + j] = (out[i * c + j] - mean) * inv;
                }
            }
            Tensor::from_vec(x.shape(), out)
        })
    }

    /// Mean cross-entropy of column logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let labels_vec = labels.to_vec();
        self.unary(Op::CrossEntropy(self.id, labels_vec), |z| {
            let (r, c) = z.dims2();
            if labels.len() != c {
                return Err(Error::dim("cross_entropy", z.shape(), &[labels.len()]));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= r) {
                return Err(Error::contract(format!(
                    "label {bad} out of range for {r} classes"
                )));
            }
            Ok(Tensor::scalar(cross_entropy_value(z, labels)))
        })
    }

    /// Mean squared error against `target`.
    pub fn mse(&self, target: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(target, Op::Mse(self.id, target.id), |a, b| {
            let diff = a.sub(b)?;
            let n = T::from_f64(diff.len() as f64);
            Ok(Tensor::scalar(diff.data().iter().map(|&d| d * d).sum::<T>() / n))
        })
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Mean(self.id), |a| {
            Ok(Tensor::scalar(a.sum() / T::from_f64(a.len() as f64)))
        })
    }

    /// Elementwise multiply by a fixed mask (dropout with pre-scaled keep mask).
    pub fn mask(&self, mask: Vec<T>) -> Result<Var<'t, T>> {
        let m = mask.clone();
        self.unary(Op::Mask(self.id, mask), move |a| {
            if m.len() != a.len() {
                return Err(Error::dim("mask", a.shape(), &[m.len()]));
            }
            Tensor::from_vec(
                a.shape(),
                a.data().iter().zip(&m).map(|(&v, &k)| v * k).collect(),
            )
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.unary(Op::SliceRows(self.id, start), |a| a.slice_rows(start, end))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.unary(Op::SliceCols(self.id, start), |a| a.slice_cols(start, end))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        self.unary(Op::Reshape(self.id), |a| a.reshape(shape))
    }

    /// Stacks vars vertically.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero parts"))?;
        let tape = first.tape;
        for p in parts {
            tape.check(p)?;
        }
        let (out, rg) = {
            let inner = tape.inner.borrow();
            let mut acc = inner.nodes[first.id].value.clone();
            let mut rg = inner.nodes[first.id].requires_grad;
            for p in &parts[1..] {
                let n = &inner.nodes[p.id];
                acc = acc.vstack(&n.value)?;
                rg |= n.requires_grad;
            }
            (acc, rg)
        };
        Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Stacks vars horizontally.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero parts"))?;
        let tape = first.tape;
        for p in parts {
            tape.check(p)?;
        }
        let (out, rg) = {
            let inner = tape.inner.borrow();
            let mut acc = inner.nodes[first.id].value.clone();
            let mut rg = inner.nodes[first.id].requires_grad;
            for p in &parts[1..] {
                let n = &inner.nodes[p.id];
                acc = acc.hstack(&n.value)?;
                rg |= n.requires_grad;
            }
            (acc, rg)
        };
        Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }
}

//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order; a [`Var`] is a
//! cheap handle to one recorded node. Node ids are assigned in creation
//! order, which makes the record topologically sorted by construction.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{contract_err, dim_err, Result};

use super::linalg;
use super::tensor::{numel, strided_gather, strided_scatter_add, strides, MatmulPlan, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Abs(usize),
    Square(usize),
    Relu(usize),
    Tanh(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Expand(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Gather { x: usize, axis: usize, indices: Rc<Vec<usize>> },
    Concat { xs: Vec<usize>, axis: usize },
    MatMul { a: usize, b: usize, plan: MatmulPlan },
    LayerNorm { x: usize, eps: f64 },
    Softmax(usize),
    L2Normalize { x: usize, eps: f64 },
    AlongAxis { x: usize, axis: usize, matrix: Rc<Tensor> },
    SpdSolve { a: usize, b: usize, factors: Rc<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation record for one forward/backward pass.
///
/// Confined to a single thread; build one tape per concurrent pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A tape that evaluates values but keeps no backward rules. Used for
    /// teacher and inference passes.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        value.check_finite("leaf creation")?;
        Ok(self.push_unchecked(value, Op::Leaf, requires_grad && self.record))
    }

    /// Reset accumulated gradients on every leaf.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], what: &str) -> Result<Var<'_>> {
        value.check_finite(what)?;
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }
}

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars belong to different tapes");
}

/// Shape of an elementwise binary result under scalar-or-equal broadcasting.
fn binary_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(dim_err!("incompatible shapes {:?} and {:?}", a, b))
    }
}

fn binary_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(a.shape(), b.shape())?;
    let n = numel(&shape);
    let at = |i: usize| if a.numel() == 1 { a.data()[0] } else { a.data()[i] };
    let bt = |i: usize| if b.numel() == 1 { b.data()[0] } else { b.data()[i] };
    Ok(Tensor::from_parts(shape, (0..n).map(|i| f(at(i), bt(i))).collect()))
}

/// Sum a gradient back down to a (possibly scalar-broadcast) operand shape.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        Tensor::from_parts(shape.to_vec(), vec![g.sum()])
    }
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.id, Tensor::numel)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, Tensor::clone)
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.with_value(self.id, Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn unary(&self, what: &str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| v.map(f));
        self.tape.push(out, op, &[self.id], what)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        what: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        same_tape(self, other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            binary_apply(&nodes[self.id].value, &nodes[other.id].value, f)?
        };
        self.tape.push(out, op, &[self.id, other.id], what)
    }

    /// Elementwise sum; operands share a shape or one is a single element.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Add a constant to every element.
    pub fn offset(&self, c: f64) -> Result<Var<'t>> {
        self.unary("offset", Op::Offset(self.id), |v| v + c)
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", Op::Abs(self.id), f64::abs)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |v| v * v)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary("silu", Op::Silu(self.id), |v| v * sigmoid(v))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| Tensor::scalar(v.sum()));
        self.tape.push(out, Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| Tensor::scalar(v.mean()));
        self.tape.push(out, Op::Mean(self.id), &[self.id], "mean")
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            if axis >= v.rank() {
                return Err(dim_err!("axis {axis} out of range for {:?}", v.shape()));
            }
            let (outer, len, inner) = lanes(v.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(out, Op::SumAxis { x: self.id, axis }, &[self.id], "sum_axis")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let out = self.tape.with_value(self.id, |v| v.clone().reshape(shape))?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            let mut seen = perm.to_vec();
            seen.sort_unstable();
            if perm.len() != v.rank() || seen.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(dim_err!("invalid permutation {:?} for {:?}", perm, v.shape()));
            }
            Ok(v.permute(perm))
        })?;
        let op = Op::Permute { x: self.id, perm: perm.to_vec() };
        self.tape.push(out, op, &[self.id], "permute")
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Repeat along axes of extent 1 to reach `shape` (same rank required).
    pub fn expand(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            let ok = v.rank() == shape.len()
                && v.shape().iter().zip(&shape).all(|(&s, &t)| s == t || s == 1);
            if !ok {
                return Err(dim_err!("cannot expand {:?} to {:?}", v.shape(), shape));
            }
            let src_st = strides(v.shape());
            let eff: Vec<usize> = v
                .shape()
                .iter()
                .zip(&src_st)
                .map(|(&s, &st)| if s == 1 { 0 } else { st })
                .collect();
            let data = strided_gather(v.data(), &shape, &eff);
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(out, Op::Expand(self.id), &[self.id], "expand")
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            if axis >= v.rank() || start + len > v.shape()[axis] {
                return Err(dim_err!(
                    "narrow({axis}, {start}, {len}) out of range for {:?}",
                    v.shape()
                ));
            }
            let (outer, full, inner) = lanes(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                data.extend_from_slice(&v.data()[base..base + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(out, Op::Narrow { x: self.id, axis, start }, &[self.id], "narrow")
    }

    /// Select entries along `axis` by index; repeats are allowed.
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            if axis >= v.rank() {
                return Err(dim_err!("axis {axis} out of range for {:?}", v.shape()));
            }
            let (outer, full, inner) = lanes(v.shape(), axis);
            if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
                return Err(dim_err!("gather index {bad} out of range {full}"));
            }
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    let base = (o * full + i) * inner;
                    data.extend_from_slice(&v.data()[base..base + inner]);
                }
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = indices.len();
            Ok(Tensor::from_parts(shape, data))
        })?;
        let op = Op::Gather { x: self.id, axis, indices: Rc::new(indices.to_vec()) };
        self.tape.push(out, op, &[self.id], "gather")
    }

    /// Join `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let tape = first.tape;
        parts.iter().for_each(|p| same_tape(first, p));
        let out = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(dim_err!("axis {axis} out of range for {base:?}"));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(dim_err!("cannot concat {s:?} with {base:?} along {axis}"));
                }
                total += s[axis];
            }
            let (outer, _, inner) = lanes(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(out, Op::Concat { xs: ids.clone(), axis }, &ids, "concat")
    }

    /// Matrix product over the last two axes; see [`Tensor::matmul`].
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let (out, plan) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let mut out = vec![0.0; plan.out_numel()];
            plan.forward(a.data(), b.data(), &mut out);
            (Tensor::from_parts(plan.out_shape.clone(), out), plan)
        };
        let op = Op::MatMul { a: self.id, b: other.id, plan };
        self.tape.push(out, op, &[self.id, other.id], "matmul")
    }

    /// Normalize the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            let d = *v.shape().last().ok_or_else(|| dim_err!("layer_norm on rank-0"))?;
            if d == 0 {
                return Err(dim_err!("layer_norm needs a non-empty last axis"));
            }
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(d) {
                let (mean, inv) = row_stats(row, eps);
                row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            }
            Ok(Tensor::from_parts(v.shape().to_vec(), data))
        })?;
        self.tape.push(out, Op::LayerNorm { x: self.id, eps }, &[self.id], "layer_norm")
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            let d = *v.shape().last().ok_or_else(|| dim_err!("softmax on rank-0"))?;
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(d.max(1)) {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            Ok(Tensor::from_parts(v.shape().to_vec(), data))
        })?;
        self.tape.push(out, Op::Softmax(self.id), &[self.id], "softmax")
    }

    /// `x / sqrt(‖x‖² + eps)` over the last axis.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            let d = *v.shape().last().ok_or_else(|| dim_err!("l2_normalize on rank-0"))?;
            let mut data = v.data().to_vec();
            for row in data.chunks_mut(d.max(1)) {
                let n = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= n);
            }
            Ok(Tensor::from_parts(v.shape().to_vec(), data))
        })?;
        self.tape.push(out, Op::L2Normalize { x: self.id, eps }, &[self.id], "l2_normalize")
    }

    /// Apply a fixed `L×L` matrix along `axis`: `out[.., i, ..] = Σⱼ M[i,j]·x[.., j, ..]`.
    pub fn along_axis(&self, axis: usize, matrix: Rc<Tensor>) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |v| -> Result<Tensor> {
            if axis >= v.rank() {
                return Err(dim_err!("axis {axis} out of range for {:?}", v.shape()));
            }
            let len = v.shape()[axis];
            if matrix.shape() != [len, len] {
                return Err(dim_err!(
                    "axis length {len} does not match operator {:?}",
                    matrix.shape()
                ));
            }
            Ok(apply_along_axis(v, axis, &matrix, false))
        })?;
        let op = Op::AlongAxis { x: self.id, axis, matrix };
        self.tape.push(out, op, &[self.id], "along_axis")
    }

    /// Solve `A·X = B` for symmetric positive definite `A` (`self`), batched
    /// over leading axes.
    pub fn spd_solve(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, rhs);
        let (out, factors) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let (batch, d, n) = solve_dims(a.shape(), b.shape())?;
            let mut out = Vec::with_capacity(b.numel());
            let mut factors = Vec::with_capacity(batch * d * d);
            for bi in 0..batch {
                let ai = &a.data()[bi * d * d..(bi + 1) * d * d];
                let bi_ = &b.data()[bi * d * n..(bi + 1) * d * n];
                let (x, l) = linalg::spd_solve_single(d, n, ai, bi_)?;
                out.extend(x);
                factors.extend(l);
            }
            (Tensor::from_parts(b.shape().to_vec(), out), factors)
        };
        let op = Op::SpdSolve { a: self.id, b: rhs.id, factors: Rc::new(factors) };
        self.tape.push(out, op, &[self.id, rhs.id], "spd_solve")
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, target: &Var<'t>) -> Result<Var<'t>> {
        self.sub(target)?.square()?.mean()
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&self, target: &Var<'t>) -> Result<Var<'t>> {
        self.sub(target)?.abs()?.mean()
    }

    /// Populate gradients of every trainable leaf reachable from this scalar.
    ///
    /// Gradients accumulate across repeated calls until [`Tape::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        let tape = self.tape;
        let leaf_grads = {
            let nodes = tape.nodes.borrow();
            let root = &nodes[self.id];
            if root.value.numel() != 1 {
                return Err(contract_err!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                ));
            }
            if !root.requires_grad {
                return Err(contract_err!("loss is not connected to any trainable leaf"));
            }
            let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
            grads[self.id] = Some(Tensor::ones(root.value.shape().to_vec()));
            let mut leaf_grads = Vec::new();
            for i in (0..=self.id).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((i, g));
                    continue;
                }
                for (input, gi) in backward_rule(&nodes, node, g) {
                    if nodes[input].requires_grad {
                        accumulate(&mut grads[input], gi);
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = tape.nodes.borrow_mut();
        for (i, g) in leaf_grads {
            accumulate(&mut nodes[i].grad, g);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn solve_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() < 2 || b.len() != a.len() {
        return Err(dim_err!("spd_solve shapes {:?} and {:?}", a, b));
    }
    let r = a.len();
    let d = a[r - 1];
    if a[r - 2] != d || b[r - 2] != d || a[..r - 2] != b[..r - 2] {
        return Err(dim_err!("spd_solve shapes {:?} and {:?}", a, b));
    }
    Ok((numel(&a[..r - 2]), d, b[r - 1]))
}

fn apply_along_axis(v: &Tensor, axis: usize, m: &Tensor, transpose: bool) -> Tensor {
    let (outer, len, inner) = lanes(v.shape(), axis);
    let mut out = vec![0.0; v.numel()];
    let md = m.data();
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..len {
            let dst = &mut out[base + i * inner..base + (i + 1) * inner];
            for j in 0..len {
                let c = if transpose { md[j * len + i] } else { md[i * len + j] };
                if c == 0.0 {
                    continue;
                }
                let src = &v.data()[base + j * inner..base + (j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
    Tensor::from_parts(v.shape().to_vec(), out)
}

fn backward_rule(nodes: &[Node], node: &Node, g: Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => {
            let ga = reduce_to(g.clone(), val(*a).shape());
            let gb = reduce_to(g, val(*b).shape());
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(g.clone(), val(*a).shape());
            let gb = reduce_to(g.scale(-1.0), val(*b).shape());
            vec![(*a, ga), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = binary_apply(&g, bv, |x, y| x * y).expect("shapes checked in forward");
            let gb = binary_apply(&g, av, |x, y| x * y).expect("shapes checked in forward");
            vec![(*a, reduce_to(ga, av.shape())), (*b, reduce_to(gb, bv.shape()))]
        }
        Op::Scale(x, c) => vec![(*x, g.scale(*c))],
        Op::Offset(x) => vec![(*x, g)],
        Op::Abs(x) => {
            let gx = g.zip_map(val(*x), |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 });
            vec![(*x, gx.expect("same shape"))]
        }
        Op::Square(x) => vec![(*x, g.zip_map(val(*x), |g, x| 2.0 * x * g).expect("same shape"))],
        Op::Relu(x) => {
            vec![(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 }).expect("same"))]
        }
        Op::Tanh(x) => {
            vec![(*x, g.zip_map(&node.value, |g, y| g * (1.0 - y * y)).expect("same shape"))]
        }
        Op::Silu(x) => {
            let gx = g.zip_map(val(*x), |g, x| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            });
            vec![(*x, gx.expect("same shape"))]
        }
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))],
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0] / n))]
        }
        Op::SumAxis { x, axis } => {
            let shape = val(*x).shape();
            let (outer, len, inner) = lanes(shape, *axis);
            let mut data = vec![0.0; numel(shape)];
            for o in 0..outer {
                for l in 0..len {
                    data[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*x, Tensor::from_parts(shape.to_vec(), data))]
        }
        Op::Reshape(x) => {
            vec![(*x, g.reshape(val(*x).shape().to_vec()).expect("same element count"))]
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![(*x, g.permute(&inv))]
        }
        Op::Expand(x) => {
            let src = val(*x).shape();
            let src_st = strides(src);
            let eff: Vec<usize> =
                src.iter().zip(&src_st).map(|(&s, &st)| if s == 1 { 0 } else { st }).collect();
            let mut data = vec![0.0; numel(src)];
            strided_scatter_add(g.data(), g.shape(), &eff, &mut data);
            vec![(*x, Tensor::from_parts(src.to_vec(), data))]
        }
        Op::Narrow { x, axis, start } => {
            let src = val(*x).shape();
            let (outer, full, inner) = lanes(src, *axis);
            let len = g.shape()[*axis];
            let mut data = vec![0.0; numel(src)];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, Tensor::from_parts(src.to_vec(), data))]
        }
        Op::Gather { x, axis, indices } => {
            let src = val(*x).shape();
            let (outer, full, inner) = lanes(src, *axis);
            let mut data = vec![0.0; numel(src)];
            for o in 0..outer {
                for (slot, &i) in indices.iter().enumerate() {
                    let from = (o * indices.len() + slot) * inner;
                    let to = (o * full + i) * inner;
                    for (d, s) in data[to..to + inner].iter_mut().zip(&g.data()[from..from + inner])
                    {
                        *d += s;
                    }
                }
            }
            vec![(*x, Tensor::from_parts(src.to_vec(), data))]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = lanes(g.shape(), *axis);
            let mut offset = 0;
            xs.iter()
                .map(|&x| {
                    let shape = val(x).shape();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(numel(shape));
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    offset += len;
                    (x, Tensor::from_parts(shape.to_vec(), data))
                })
                .collect()
        }
        Op::MatMul { a, b, plan } => {
            let (av, bv) = (val(*a), val(*b));
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            plan.grad_lhs(g.data(), bv.data(), &mut ga);
            plan.grad_rhs(av.data(), g.data(), &mut gb);
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::LayerNorm { x, eps } => {
            let xv = val(*x);
            let d = *xv.shape().last().expect("rank checked in forward");
            let mut out = vec![0.0; xv.numel()];
            for ((row, grow), orow) in
                xv.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d))
            {
                let (mean, inv) = row_stats(row, *eps);
                let y: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let gm = grow.iter().sum::<f64>() / d as f64;
                let gym = grow.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(&y) {
                    *o = inv * (gi - gm - yi * gym);
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), out))]
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().expect("rank checked in forward");
            let mut out = vec![0.0; y.numel()];
            for ((yr, gr), orow) in y.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yi), gi) in orow.iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![(*x, Tensor::from_parts(y.shape().to_vec(), out))]
        }
        Op::L2Normalize { x, eps } => {
            let xv = val(*x);
            let d = *xv.shape().last().expect("rank checked in forward");
            let mut out = vec![0.0; xv.numel()];
            for ((xr, gr), orow) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d))
            {
                let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, xi), gi) in orow.iter_mut().zip(xr).zip(gr) {
                    *o = gi / n - xi * gx / (n * n * n);
                }
            }
            vec![(*x, Tensor::from_parts(xv.shape().to_vec(), out))]
        }
        Op::AlongAxis { x, axis, matrix } => vec![(*x, apply_along_axis(&g, *axis, matrix, true))],
        Op::SpdSolve { a, b, factors } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, d, n) = solve_dims(av.shape(), bv.shape()).expect("checked in forward");
            let mut gb = g.into_data();
            let mut ga = vec![0.0; av.numel()];
            let x = node.value.data();
            for bi in 0..batch {
                let l = &factors[bi * d * d..(bi + 1) * d * d];
                let gbi = &mut gb[bi * d * n..(bi + 1) * d * n];
                // A symmetric, so Aᵀ⁻¹ G = A⁻¹ G.
                linalg::cholesky_solve_in_place(d, n, l, gbi);
                let xi = &x[bi * d * n..(bi + 1) * d * n];
                let gai = &mut ga[bi * d * d..(bi + 1) * d * d];
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for k in 0..n {
                            acc += gbi[r * n + k] * xi[c * n + k];
                        }
                        gai[r * d + c] = -acc;
                    }
                }
            }
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
    }
}

//! Reverse-mode differentiation over a Wengert tape.
//!
//! A [`GradTape`] records every executed op; [`Var`] handles index into it.
//! `backward` walks the record once in reverse, accumulating gradients
//! additively at fan-out, then adds each bound [`Parameter`]'s gradient into
//! its grad slot (zeros when the parameter was unreachable from the root).

use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{
    conv3d_backward_bias, conv3d_backward_data, conv3d_backward_weight, conv3d_forward, same_pad,
};
use super::ops::{mm_acc, mm_ta_acc, mm_tb_acc, softmax_axis, softmax_backward_axis};
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Default)]
pub struct GradTape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    bindings: Vec<(Parameter, usize)>,
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Softmax { a: usize, axis: usize },
    SumAll(usize),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv3d { x: usize, w: usize, b: Option<usize>, stride: (usize, usize, usize), pad: (usize, usize, usize) },
    Reshape(usize),
    Transpose2d(usize),
    GatherRows { a: usize, idx: Vec<usize> },
    StackRows { parts: Vec<usize> },
    CrossEntropyRows { logits: usize, targets: Vec<usize>, weights: Vec<f64> },
}

/// Handle to one tape node. Cheap to clone; all arithmetic goes through the
/// owning tape, so mixing vars from different tapes is a logic error.
#[derive(Clone)]
pub struct Var {
    tape: GradTape,
    id: usize,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a tensor that does not require gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Bind a parameter to the tape. Binding the same parameter twice returns
    /// the same node, so fan-out accumulates instead of forking.
    pub fn param(&self, p: &Parameter) -> Var {
        {
            let inner = self.inner.borrow();
            if let Some(&(_, id)) = inner.bindings.iter().find(|(q, _)| q.ptr_eq(p)) {
                return Var { tape: self.clone(), id };
            }
        }
        let value = p.value().clone();
        let var = self.push(value, true, Op::Leaf);
        self.inner.borrow_mut().bindings.push((p.clone(), var.id));
        var
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, needs_grad, op });
        Var { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    fn same_tape(&self, other: &GradTape) {
        assert!(Rc::ptr_eq(&self.inner, &other.inner), "vars belong to different tapes");
    }
}

impl Var {
    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|v| v.numel())
    }

    pub fn value(&self) -> Tensor {
        self.with_value(|v| v.clone())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|v| v.item())
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn zip_elementwise(
        &self,
        other: &Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        self.tape.same_tape(&other.tape);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op_name,
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, op(self.id, other.id)))
    }

    fn map_elementwise(
        &self,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let value = Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())?;
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, op(self.id)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.zip_elementwise(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.zip_elementwise(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.zip_elementwise(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.zip_elementwise(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&self) -> Result<Var> {
        self.map_elementwise(|x| -x, Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.map_elementwise(|x| c * x, |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.map_elementwise(|x| x + c, Op::AddScalar)
    }

    pub fn relu(&self) -> Result<Var> {
        self.map_elementwise(|x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.map_elementwise(sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var> {
        self.map_elementwise(softplus, Op::Softplus)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        if axis >= a.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for rank {}", a.rank()),
            ));
        }
        let mut out = vec![0.0; a.numel()];
        softmax_axis(a.data(), &mut out, a.shape(), axis);
        let value = Tensor::new(a.shape().to_vec(), out)?;
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, Op::Softmax { a: self.id, axis }))
    }

    pub fn sum_all(&self) -> Result<Var> {
        let total = self.with_value(|v| v.data().iter().sum::<f64>());
        let value = Tensor::scalar(total)?;
        Ok(self.tape.push(value, self.needs_grad(), Op::SumAll(self.id)))
    }

    pub fn mean_all(&self) -> Result<Var> {
        let n = self.numel();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Matrix product. Accepts `[m,k]x[k,n]`, batched `[B,m,k]x[B,k,n]`, and
    /// one-sided broadcast of a rank-2 operand against a batched one.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.tape.same_tape(&other.tape);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
        let value = matmul_forward(a, b)?;
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, Op::Matmul(self.id, other.id)))
    }

    /// Affine map over the last axis: `y = x W^T + b` with `w: [d_out, d_in]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        self.tape.same_tape(&w.tape);
        if let Some(b) = b {
            self.tape.same_tape(&b.tape);
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let wt = &inner.nodes[w.id].value;
        if wt.rank() != 2 {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {:?}", wt.shape())));
        }
        let (d_out, d_in) = (wt.shape()[0], wt.shape()[1]);
        if x.rank() == 0 || *x.shape().last().unwrap() != d_in {
            return Err(Error::AxisMismatch {
                op: "linear",
                axis: "input feature",
                expected: d_in,
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        let rows = x.numel() / d_in;
        let mut out = vec![0.0; rows * d_out];
        mm_tb_acc(x.data(), wt.data(), &mut out, rows, d_in, d_out);
        if let Some(bv) = b {
            let bt = &inner.nodes[bv.id].value;
            if bt.shape() != [d_out] {
                return Err(Error::AxisMismatch {
                    op: "linear",
                    axis: "bias",
                    expected: d_out,
                    got: bt.numel(),
                });
            }
            for r in 0..rows {
                for (o, bx) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(bt.data()) {
                    *o += bx;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let needs = inner.nodes[self.id].needs_grad
            || inner.nodes[w.id].needs_grad
            || b.map_or(false, |b| inner.nodes[b.id].needs_grad);
        drop(inner);
        Ok(self.tape.push(
            value,
            needs,
            Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) },
        ))
    }

    /// 3D cross-correlation; see `conv3d_forward` for geometry.
    pub fn conv3d(
        &self,
        w: &Var,
        b: Option<&Var>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<Var> {
        self.tape.same_tape(&w.tape);
        if let Some(b) = b {
            self.tape.same_tape(&b.tape);
        }
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let wt = &inner.nodes[w.id].value;
        let bt = b.map(|b| &inner.nodes[b.id].value);
        let value = conv3d_forward(x, wt, bt, stride, pad)?;
        let needs = inner.nodes[self.id].needs_grad
            || inner.nodes[w.id].needs_grad
            || b.map_or(false, |b| inner.nodes[b.id].needs_grad);
        drop(inner);
        Ok(self.tape.push(
            value,
            needs,
            Op::Conv3d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad },
        ))
    }

    /// Stride-1 conv with zero padding that preserves T, H, W (odd kernels).
    pub fn conv3d_same(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let pad = w.with_value(|wt| same_pad(wt.shape()));
        self.conv3d(w, b, (1, 1, 1), pad)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshaped(shape)?;
        let needs = self.needs_grad();
        Ok(self.tape.push(value, needs, Op::Reshape(self.id)))
    }

    pub fn transpose2d(&self) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        if a.rank() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {:?}", a.shape())));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; m * n];
        transpose_into(a.data(), &mut out, m, n);
        let value = Tensor::new(vec![n, m], out)?;
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, Op::Transpose2d(self.id)))
    }

    /// Select rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        if a.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("need rank 2, got {:?}", a.shape())));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range 0..{n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&a.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        let needs = inner.nodes[self.id].needs_grad;
        drop(inner);
        Ok(self.tape.push(value, needs, Op::GatherRows { a: self.id, idx: idx.to_vec() }))
    }

    /// Run backward from this scalar root, accumulating into bound parameters.
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose_into(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Concatenate rank-2 tensors along axis 0.
pub fn stack_rows(parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
    let tape = first.tape.clone();
    let mut d = None;
    let mut total = 0;
    let mut needs = false;
    {
        let inner = tape.inner.borrow();
        for p in parts {
            tape.same_tape(&p.tape);
            let v = &inner.nodes[p.id].value;
            if v.rank() != 2 {
                return Err(Error::shape("stack_rows", format!("need rank 2, got {:?}", v.shape())));
            }
            match d {
                None => d = Some(v.shape()[1]),
                Some(d) if d != v.shape()[1] => {
                    return Err(Error::AxisMismatch {
                        op: "stack_rows",
                        axis: "column",
                        expected: d,
                        got: v.shape()[1],
                    });
                }
                _ => {}
            }
            total += v.shape()[0];
            needs |= inner.nodes[p.id].needs_grad;
        }
    }
    let d = d.unwrap();
    let mut out = Vec::with_capacity(total * d);
    {
        let inner = tape.inner.borrow();
        for p in parts {
            out.extend_from_slice(inner.nodes[p.id].value.data());
        }
    }
    let value = Tensor::new(vec![total, d], out)?;
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(value, needs, Op::StackRows { parts: ids }))
}

/// Class-weighted cross-entropy over rows of logits `[N, C]`, averaged by row
/// count: loss = (1/N) * sum_i weights[t_i] * nll_i. Down-weighting a class
/// scales its rows' contribution without inflating the others.
pub fn cross_entropy_rows(logits: &Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let tape = logits.tape.clone();
    let inner = tape.inner.borrow();
    let l = &inner.nodes[logits.id].value;
    if l.rank() != 2 {
        return Err(Error::shape("cross_entropy", format!("need rank 2 logits, got {:?}", l.shape())));
    }
    let (n, c) = (l.shape()[0], l.shape()[1]);
    if targets.len() != n {
        return Err(Error::AxisMismatch {
            op: "cross_entropy",
            axis: "row",
            expected: n,
            got: targets.len(),
        });
    }
    if weights.len() != c {
        return Err(Error::AxisMismatch {
            op: "cross_entropy",
            axis: "class",
            expected: c,
            got: weights.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::shape("cross_entropy", format!("target class {bad} out of range 0..{c}")));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = &l.data()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        total += weights[t] * (lse - row[t]);
    }
    let value = Tensor::scalar(total / n as f64)?;
    let needs = inner.nodes[logits.id].needs_grad;
    drop(inner);
    Ok(tape.push(
        value,
        needs,
        Op::CrossEntropyRows { logits: logits.id, targets: targets.to_vec(), weights: weights.to_vec() },
    ))
}

/// Pick the `k` rows of `values` with the largest `scores`. Indices come back
/// score-descending with ties broken toward the lower index; gradients flow
/// only into the selected rows (selection itself is not differentiated).
pub fn topk_select(scores: &Tensor, values: &Var, k: usize) -> Result<(Vec<usize>, Var)> {
    let n = scores.numel();
    if scores.rank() != 1 {
        return Err(Error::shape("topk_select", format!("scores must be rank 1, got {:?}", scores.shape())));
    }
    let rows = values.shape();
    if rows.len() != 2 || rows[0] != n {
        return Err(Error::AxisMismatch {
            op: "topk_select",
            axis: "row",
            expected: n,
            got: rows.first().copied().unwrap_or(0),
        });
    }
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let idx = topk_indices(scores.data(), k);
    let selected = values.gather_rows(&idx)?;
    Ok((idx, selected))
}

/// Indices of the `k` largest values, score-descending, ties toward lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

fn backward(root: &Var) -> Result<()> {
    let inner = root.tape.inner.borrow();
    let nodes = &inner.nodes;
    let root_shape = nodes[root.id].value.shape().to_vec();
    if nodes[root.id].value.numel() != 1 {
        return Err(Error::NonScalarRoot { shape: root_shape });
    }

    let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
    grads[root.id] = Some(vec![1.0]);

    for id in (0..=root.id).rev() {
        let Some(gout) = grads[id].take() else { continue };
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let needs = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {
                grads[id] = Some(gout);
                continue;
            }
            Op::Add(a, b) => {
                if needs(*a) && needs(*b) {
                    acc(&mut grads[*b], gout.clone());
                    acc(&mut grads[*a], gout);
                } else if needs(*a) {
                    acc(&mut grads[*a], gout);
                } else if needs(*b) {
                    acc(&mut grads[*b], gout);
                }
            }
            Op::Sub(a, b) => {
                if needs(*b) {
                    acc(&mut grads[*b], gout.iter().map(|g| -g).collect());
                }
                if needs(*a) {
                    acc(&mut grads[*a], gout);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = nodes[*b].value.data();
                    acc(&mut grads[*a], gout.iter().zip(bv).map(|(g, v)| g * v).collect());
                }
                if needs(*b) {
                    let av = nodes[*a].value.data();
                    acc(&mut grads[*b], gout.iter().zip(av).map(|(g, v)| g * v).collect());
                }
            }
            Op::Div(a, b) => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if needs(*a) {
                    acc(&mut grads[*a], gout.iter().zip(bv).map(|(g, y)| g / y).collect());
                }
                if needs(*b) {
                    let g = gout
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    acc(&mut grads[*b], g);
                }
            }
            Op::Neg(a) => acc(&mut grads[*a], gout.iter().map(|g| -g).collect()),
            Op::Scale(a, c) => acc(&mut grads[*a], gout.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(&mut grads[*a], gout),
            Op::Relu(a) => {
                let xv = nodes[*a].value.data();
                acc(
                    &mut grads[*a],
                    gout.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                acc(&mut grads[*a], gout.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softplus(a) => {
                let xv = nodes[*a].value.data();
                acc(&mut grads[*a], gout.iter().zip(xv).map(|(g, x)| g * sigmoid(*x)).collect());
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                softmax_backward_axis(y, &gout, &mut dx, node.value.shape(), *axis);
                acc(&mut grads[*a], dx);
            }
            Op::SumAll(a) => {
                let n = nodes[*a].value.numel();
                acc(&mut grads[*a], vec![gout[0]; n]);
            }
            Op::Matmul(a, b) => {
                let (da, db) = matmul_backward(&nodes[*a].value, &nodes[*b].value, &gout, needs(*a), needs(*b));
                if let Some(da) = da {
                    acc(&mut grads[*a], da);
                }
                if let Some(db) = db {
                    acc(&mut grads[*b], db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / d_in;
                if needs(*x) {
                    let mut dx = vec![0.0; xv.numel()];
                    mm_acc(&gout, wv.data(), &mut dx, rows, d_out, d_in);
                    acc(&mut grads[*x], dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; wv.numel()];
                    mm_ta_acc(&gout, xv.data(), &mut dw, rows, d_out, d_in);
                    acc(&mut grads[*w], dw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; d_out];
                        for r in 0..rows {
                            for (s, g) in db.iter_mut().zip(&gout[r * d_out..(r + 1) * d_out]) {
                                *s += g;
                            }
                        }
                        acc(&mut grads[*b], db);
                    }
                }
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let dout = Tensor::from_parts(node.value.shape().to_vec(), gout);
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                if needs(*x) {
                    let dx = conv3d_backward_data(&dout, wv, xv.shape(), *stride, *pad);
                    acc(&mut grads[*x], dx.into_data());
                }
                if needs(*w) {
                    let dw = conv3d_backward_weight(&dout, xv, wv.shape(), *stride, *pad);
                    acc(&mut grads[*w], dw.into_data());
                }
                if let Some(b) = b {
                    if needs(*b) {
                        acc(&mut grads[*b], conv3d_backward_bias(&dout).into_data());
                    }
                }
            }
            Op::Transpose2d(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; gout.len()];
                transpose_into(&gout, &mut dx, n, m);
                acc(&mut grads[*a], dx);
            }
            Op::GatherRows { a, idx } => {
                let d = node.value.shape()[1];
                let mut dx = vec![0.0; nodes[*a].value.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for (s, g) in dx[i * d..(i + 1) * d].iter_mut().zip(&gout[k * d..(k + 1) * d]) {
                        *s += g;
                    }
                }
                acc(&mut grads[*a], dx);
            }
            Op::StackRows { parts } => {
                let d = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let rows = nodes[p].value.shape()[0];
                    if needs(p) {
                        acc(&mut grads[p], gout[off * d..(off + rows) * d].to_vec());
                    }
                    off += rows;
                }
            }
            Op::CrossEntropyRows { logits, targets, weights } => {
                let l = &nodes[*logits].value;
                let (n, c) = (l.shape()[0], l.shape()[1]);
                let g0 = gout[0];
                let mut dl = vec![0.0; n * c];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &l.data()[i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    let scale = g0 * weights[t] / n as f64;
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / z;
                        dl[i * c + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                acc(&mut grads[*logits], dl);
            }
        }
    }

    for (param, id) in &inner.bindings {
        match grads[*id].take() {
            Some(g) => param.accumulate_grad(&g),
            None => param.accumulate_grad(&vec![0.0; nodes[*id].value.numel()]),
        }
    }
    Ok(())
}

fn acc(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = |expected, got| Error::AxisMismatch { op: "matmul", axis: "inner", expected, got };
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (kb, n) = (b.shape()[0], b.shape()[1]);
            if k != kb {
                return Err(mismatch(k, kb));
            }
            let mut out = vec![0.0; m * n];
            mm_acc(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        (3, 3) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bb, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if ba != bb {
                return Err(Error::AxisMismatch { op: "matmul", axis: "batch", expected: ba, got: bb });
            }
            if k != kb {
                return Err(mismatch(k, kb));
            }
            let mut out = vec![0.0; ba * m * n];
            for i in 0..ba {
                mm_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![ba, m, n], out)
        }
        (3, 2) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (kb, n) = (b.shape()[0], b.shape()[1]);
            if k != kb {
                return Err(mismatch(k, kb));
            }
            let mut out = vec![0.0; ba * m * n];
            for i in 0..ba {
                mm_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    b.data(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![ba, m, n], out)
        }
        (2, 3) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bb, kb, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if k != kb {
                return Err(mismatch(k, kb));
            }
            let mut out = vec![0.0; bb * m * n];
            for i in 0..bb {
                mm_acc(
                    a.data(),
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::new(vec![bb, m, n], out)
        }
        (ra, rb) => Err(Error::shape(
            "matmul",
            format!("unsupported ranks {ra} x {rb} (shapes {:?}, {:?})", a.shape(), b.shape()),
        )),
    }
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    gout: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut da = need_a.then(|| vec![0.0; a.numel()]);
    let mut db = need_b.then(|| vec![0.0; b.numel()]);
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if let Some(da) = da.as_mut() {
                mm_tb_acc(gout, b.data(), da, m, n, k);
            }
            if let Some(db) = db.as_mut() {
                mm_ta_acc(a.data(), gout, db, m, k, n);
            }
        }
        (3, 3) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            for i in 0..ba {
                let g = &gout[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    mm_tb_acc(g, &b.data()[i * k * n..(i + 1) * k * n], &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                }
                if let Some(db) = db.as_mut() {
                    mm_ta_acc(&a.data()[i * m * k..(i + 1) * m * k], g, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                }
            }
        }
        (3, 2) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            for i in 0..ba {
                let g = &gout[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    mm_tb_acc(g, b.data(), &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                }
                if let Some(db) = db.as_mut() {
                    mm_ta_acc(&a.data()[i * m * k..(i + 1) * m * k], g, db, m, k, n);
                }
            }
        }
        (2, 3) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (bb, n) = (b.shape()[0], b.shape()[2]);
            for i in 0..bb {
                let g = &gout[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    mm_tb_acc(g, &b.data()[i * k * n..(i + 1) * k * n], da, m, n, k);
                }
                if let Some(db) = db.as_mut() {
                    mm_ta_acc(a.data(), g, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                }
            }
        }
        _ => unreachable!("forward validated ranks"),
    }
    (da, db)
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles in
//! execution order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse.
//!
//! One tape belongs to one forward pass on one thread.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    PowScalar(usize, f64),
    Abs(usize),
    Exp(usize),
    Sigmoid(usize),
    Swish(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNorm(usize),
    Sum(usize),
    MeanSquare(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Gather(usize, Arc<[usize]>),
    Reshape(usize),
    /// Inputs q, k, v, alpha, beta and the saved states.
    GlaScan([usize; 5], Arc<ScanTrace>),
}

#[derive(Debug)]
struct ScanTrace {
    s0: Vec<f64>,
    /// State after each row.
    states: Vec<f64>,
    segment: usize,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.id].clone()),
        }
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Arc::new(value), Op::Leaf, true)
    }

    /// A leaf sharing storage with the caller, gradient tracked.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Arc::new(value), Op::Leaf, false)
    }

    fn push_node(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(Arc::new(value), op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, id, &g, &mut grads)?;
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: usize) -> Option<&'a mut Tensor> {
    if !nodes[id].requires_grad {
        return None;
    }
    let shape = nodes[id].value.shape().to_vec();
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(shape)))
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.sum_to_shape(val(*a).shape())?)?;
            accumulate(nodes, grads, *b, g.sum_to_shape(val(*b).shape())?)?;
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.sum_to_shape(val(*a).shape())?)?;
            accumulate(nodes, grads, *b, g.scale(-1.0).sum_to_shape(val(*b).shape())?)?;
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.mul(val(*b))?.sum_to_shape(val(*a).shape())?;
                accumulate(nodes, grads, *a, ga)?;
            }
            if nodes[*b].requires_grad {
                let gb = g.mul(val(*a))?.sum_to_shape(val(*b).shape())?;
                accumulate(nodes, grads, *b, gb)?;
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s))?,
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone())?,
        Op::PowScalar(a, p) => {
            let x = val(*a);
            let gx = g.zip_broadcast(x, "pow", |gv, xv| gv * p * xv.powf(p - 1.0))?;
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::Abs(a) => {
            let gx = g.zip_broadcast(val(*a), "abs", |gv, xv| {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })?;
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.mul(out)?)?,
        Op::Sigmoid(a) => {
            let gx = g.zip_broadcast(out, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::Swish(a) => {
            let gx = g.zip_broadcast(val(*a), "swish", |gv, x| {
                let s = sigmoid(x);
                gv * (s + x * s * (1.0 - s))
            })?;
            accumulate(nodes, grads, *a, gx)?;
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2("matmul")?;
            let (_, n) = val(*b).dims2("matmul")?;
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                matmul_a_bt_into(g.data(), val(*b).data(), ga.data_mut(), m, n, k);
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                matmul_at_b_into(val(*a).data(), g.data(), gb.data_mut(), m, k, n);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()?)?,
        Op::SoftmaxRows(a) => {
            let (r, c) = out.dims2("softmax")?;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let y = out.row(i);
                let gy = g.row(i);
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new([r, c], gx)?)?;
        }
        Op::LayerNorm(a) => {
            let x = val(*a);
            let c = *x.shape().last().unwrap();
            let r = x.numel() / c;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let xs = &x.data()[i * c..(i + 1) * c];
                let (_, inv) = row_stats(xs);
                let y = &out.data()[i * c..(i + 1) * c];
                let gy = &g.data()[i * c..(i + 1) * c];
                let mean_g = gy.iter().sum::<f64>() / c as f64;
                let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    gx[i * c + j] = inv * (gy[j] - mean_g - y[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), gx)?)?;
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape().to_vec(), gv))?;
        }
        Op::MeanSquare(a) => {
            let x = val(*a);
            let k = 2.0 * g.item() / x.numel() as f64;
            accumulate(nodes, grads, *a, x.scale(k))?;
        }
        Op::SliceRows(a, start) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                let c = ga.shape()[1];
                let dst = &mut ga.data_mut()[start * c..start * c + g.numel()];
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Op::SliceCols(a, start) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                let c = ga.shape()[1];
                let (r, w) = g.dims2("slice_cols")?;
                for i in 0..r {
                    for j in 0..w {
                        ga.data_mut()[i * c + start + j] += g.data()[i * w + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if nodes[p].requires_grad {
                    let piece = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    accumulate(nodes, grads, p, piece)?;
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = g.dims2("concat_cols")?;
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if nodes[p].requires_grad {
                    let mut piece = Vec::with_capacity(r * w);
                    for i in 0..r {
                        piece.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new([r, w], piece)?)?;
                }
                offset += w;
            }
        }
        Op::Gather(a, index) => {
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                let dst = ga.data_mut();
                for (&src, &gv) in index.iter().zip(g.data()) {
                    dst[src] += gv;
                }
            }
        }
        Op::Reshape(a) => {
            let ga = Tensor::new(val(*a).shape().to_vec(), g.data().to_vec())?;
            accumulate(nodes, grads, *a, ga)?;
        }
        Op::GlaScan(ids, trace) => {
            let [q, k, v, al, be] = ids.map(|i| val(i).data());
            let (len, dk) = val(ids[0]).dims2("gla_scan")?;
            let dv = val(ids[2]).shape()[1];
            let sz = dk * dv;
            let go = g.data();
            let mut dq = vec![0.0; len * dk];
            let mut dk_ = vec![0.0; len * dk];
            let mut dv_ = vec![0.0; len * dv];
            let mut da = vec![0.0; len * dk];
            let mut db = vec![0.0; len * dv];
            let mut ds = vec![0.0; sz];
            for t in (0..len).rev() {
                if (t + 1) % trace.segment == 0 {
                    ds.iter_mut().for_each(|x| *x = 0.0);
                }
                let (qt, kt) = (&q[t * dk..(t + 1) * dk], &k[t * dk..(t + 1) * dk]);
                let (vt, at, bt) = (&v[t * dv..(t + 1) * dv], &al[t * dk..(t + 1) * dk], &be[t * dv..(t + 1) * dv]);
                let got = &go[t * dv..(t + 1) * dv];
                let cur = &trace.states[t * sz..(t + 1) * sz];
                let prev = if t % trace.segment == 0 {
                    &trace.s0[..]
                } else {
                    &trace.states[(t - 1) * sz..t * sz]
                };
                for i in 0..dk {
                    let row = i * dv;
                    let mut acc_q = 0.0;
                    let mut acc_k = 0.0;
                    let mut acc_a = 0.0;
                    for j in 0..dv {
                        acc_q += got[j] * cur[row + j];
                        let d = ds[row + j] + qt[i] * got[j];
                        acc_k += d * vt[j];
                        dv_[t * dv + j] += kt[i] * d;
                        let dg = d * prev[row + j];
                        acc_a += dg * bt[j];
                        db[t * dv + j] += at[i] * dg;
                        ds[row + j] = d * at[i] * bt[j];
                    }
                    dq[t * dk + i] = acc_q;
                    dk_[t * dk + i] = acc_k;
                    da[t * dk + i] = acc_a;
                }
            }
            for (id, (data, w)) in ids.iter().zip([(dq, dk), (dk_, dk), (dv_, dv), (da, dk), (db, dv)]) {
                accumulate(nodes, grads, *id, Tensor::new([len, w], data)?)?;
            }
        }
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean and inverse standard deviation of one normalization row.
fn row_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Layer normalization over the last axis, without affine terms.
pub fn layer_norm(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let (mean, inv) = row_stats(row);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, c) = x.dims2("softmax")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().zip_broadcast(&other.value(), name, f)?;
        Ok(self.tape.push(v, make(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op, &[self.id])
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::PowScalar(self.id, p), |x| x.powf(p))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `x · σ(x)`.
    pub fn swish(&self) -> Var<'t> {
        self.unary(Op::Swish(self.id), swish)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = softmax_rows(&self.value())?;
        Ok(self.tape.push(v, Op::SoftmaxRows(self.id), &[self.id]))
    }

    /// Normalization over the last axis with epsilon [`LAYER_NORM_EPS`].
    pub fn layer_norm(&self) -> Var<'t> {
        let v = layer_norm(&self.value());
        self.tape.push(v, Op::LayerNorm(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean of squared entries.
    pub fn mean_square(&self) -> Var<'t> {
        let x = self.value();
        let v = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64;
        self.tape.push(Tensor::scalar(v), Op::MeanSquare(self.id), &[self.id])
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let v = Tensor::new([len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.tape.push(v, Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn row(&self, i: usize) -> Result<Var<'t>> {
        self.slice_rows(i, 1)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new([r, len], data)?;
        Ok(self.tape.push(v, Op::SliceCols(self.id, start), &[self.id]))
    }

    /// Reinterprets the data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    /// `out.flat[i] = self.flat[index[i]]`, producing `shape`.
    pub fn gather(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::InvalidShape {
                op: "gather",
                msg: format!("index {bad} out of range for {:?}", x.shape()),
            });
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.tape.push(v, Op::Gather(self.id, index), &[self.id]))
    }
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
    let tape = first.tape;
    let mut data = Vec::new();
    let mut rows = 0;
    let cols = first.value().dims2("concat_rows")?.1;
    for p in parts {
        p.check_same_tape(first);
        let v = p.value();
        let (r, c) = v.dims2("concat_rows")?;
        if c != cols {
            return Err(Error::shape("concat_rows", first.value().shape(), v.shape()));
        }
        rows += r;
        data.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(Tensor::new([rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids))
}

/// Joins matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
    let tape = first.tape;
    let rows = first.value().dims2("concat_cols")?.0;
    let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let mut total = 0;
    for (p, v) in parts.iter().zip(&values) {
        p.check_same_tape(first);
        let (r, c) = v.dims2("concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row(i));
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(Tensor::new([rows, total], data)?, Op::ConcatCols(ids.clone()), &ids))
}

/// Fused single-head gated recurrence
/// `S_t = (α_tᵀβ_t) ⊙ S_{t−1} + k_tᵀv_t`, `o_t = q_t S_t`.
///
/// Rows are split into independent sequences of `segment` rows, each
/// starting from `s0`. Returns the outputs and the state after the last row.
/// `s0` is treated as a constant.
pub fn gla_scan<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    alpha: Var<'t>,
    beta: Var<'t>,
    s0: &Tensor,
    segment: usize,
) -> Result<(Var<'t>, Tensor)> {
    let vals = [q, k, v, alpha, beta].map(|x| {
        x.check_same_tape(&q);
        x.value()
    });
    let (len, dk) = vals[0].dims2("gla_scan")?;
    let (_, dv) = vals[2].dims2("gla_scan")?;
    for (name, i, w) in [("k", 1, dk), ("v", 2, dv), ("alpha", 3, dk), ("beta", 4, dv)] {
        if vals[i].shape() != [len, w] {
            return Err(Error::InvalidShape {
                op: "gla_scan",
                msg: format!("{name} has shape {:?}, expected [{len}, {w}]", vals[i].shape()),
            });
        }
    }
    if s0.shape() != [dk, dv] {
        return Err(Error::shape("gla_scan", s0.shape(), &[dk, dv]));
    }
    if segment == 0 || len % segment != 0 {
        return Err(Error::InvalidShape {
            op: "gla_scan",
            msg: format!("{len} rows do not split into sequences of {segment}"),
        });
    }
    let [qd, kd, vd, ad, bd] = [0, 1, 2, 3, 4].map(|i| vals[i].data());
    let sz = dk * dv;
    let mut states = vec![0.0; len * sz];
    let mut out = vec![0.0; len * dv];
    for t in 0..len {
        let (done, rest) = states.split_at_mut(t * sz);
        let prev = if t % segment == 0 { s0.data() } else { &done[(t - 1) * sz..] };
        let cur = &mut rest[..sz];
        for i in 0..dk {
            let (a, kv) = (ad[t * dk + i], kd[t * dk + i]);
            let qv = qd[t * dk + i];
            for j in 0..dv {
                let s = a * bd[t * dv + j] * prev[i * dv + j] + kv * vd[t * dv + j];
                cur[i * dv + j] = s;
                out[t * dv + j] += qv * s;
            }
        }
    }
    let last = Tensor::new([dk, dv], states[(len - 1) * sz..].to_vec())?;
    let ids = [q, k, v, alpha, beta].map(|x| x.id);
    let trace = ScanTrace {
        s0: s0.data().to_vec(),
        states,
        segment,
    };
    let o = q.tape.push(Tensor::new([len, dv], out)?, Op::GlaScan(ids, Arc::new(trace)), &ids);
    Ok((o, last))
}

/// Plain forward matmul used where no tape is needed.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 2]));
        assert!(x.sigmoid().value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let y = layer_norm(&Tensor::full([3, 5], 7.25));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let tape = Tape::new();
        let x0 = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]);
        let x = tape.leaf(x0.clone());
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap().get(x);
        assert_eq!(g, x0.scale(2.0));
    }

    #[test]
    fn sigmoid_gradient_is_analytic() {
        let tape = Tape::new();
        let x0 = t(&[4], &[-3.0, -0.5, 0.0, 2.0]);
        let x = tape.leaf(x0.clone());
        let loss = x.sigmoid().sum();
        let g = tape.backward(loss).unwrap().get(x);
        for (gv, xv) in g.data().iter().zip(x0.data()) {
            let s = sigmoid(*xv);
            assert!((gv - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2, 2]));
        let unused = tape.leaf(Tensor::ones([3]));
        let loss = x.sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused), Tensor::zeros([3]));
    }

    #[test]
    fn broadcast_gradient_sums_over_stretched_axes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([4, 3]));
        let bias = tape.leaf(Tensor::zeros([1, 3]));
        let loss = x.add(bias).unwrap().sum();
        let g = tape.backward(loss).unwrap().get(bias);
        assert_eq!(g.shape(), &[1, 3]);
        assert_eq!(g.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap().get(x);
        assert_eq!(g.item(), 7.0);
    }

    #[test]
    fn concat_and_slice_are_adjoint() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[5., 6.]));
        let c = concat_cols(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let w = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let loss = c.slice_cols(1, 2).unwrap().mul(w.slice_cols(0, 2).unwrap()).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).data(), &[0., 1., 0., 4.]);
        assert_eq!(grads.get(b).data(), &[2., 5.]);
    }
}

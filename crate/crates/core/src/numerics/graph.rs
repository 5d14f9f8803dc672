//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op appends one node holding its output value, so the node list is
//! always in topological order and backward is a single reverse sweep.
//! Leaf gradients accumulate across `backward` calls until `zero_grad`.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::numerics::kernels::{
    self, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, matmul_dims, Activation,
};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Normalize { x: Var, inv_std: Vec<T> },
    Softmax(Var),
    Activation(Var, Activation),
    RowNorm(Var),
    ClampMin(Var, T),
    Rope { x: Var, positions: Vec<usize>, r: usize, base: f64 },
    ShiftRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    IndexAddRows { base: Var, src: Var, index: Vec<usize> },
    SwapAxes01(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape plus the values it produced.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_rows(shape: &[usize]) -> (usize, usize, usize) {
    // (batch, rows along axis -2, last dim)
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (
            shape[..n - 2].iter().product(),
            shape[n - 2],
            shape[n - 1],
        ),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads.remove(&v.0)
    }

    /// Drops every node recorded after the first `len`, for reusing a graph
    /// whose leading nodes (typically constants) stay fixed.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.retain(|&i, _| i < len);
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            match kind {
                Binary::Add => kernels::broadcast_binary(av, bv, name, |x, y| x + y)?,
                Binary::Sub => kernels::broadcast_binary(av, bv, name, |x, y| x - y)?,
                Binary::Mul => kernels::broadcast_binary(av, bv, name, |x, y| x * y)?,
                Binary::Div => kernels::broadcast_binary(av, bv, name, |x, y| x / y)?,
            }
        };
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = kernels::activate(self.value(a), kind);
        self.push(value, Op::Activation(a, kind), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Elu)
    }

    pub fn relu_squared(&mut self, a: Var) -> Var {
        self.activation(a, Activation::ReluSquared)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), &[a])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// Matrix product with optional transposition of the last two axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = kernels::matmul_ex(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(value, Op::Matmul { a, b, ta, tb }, &[a, b]))
    }

    /// Pre-affine layer normalization over the last axis.
    pub fn normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (value, inv_std) = kernels::normalize_rows(self.value(x), eps)?;
        Ok(self.push(value, Op::Normalize { x, inv_std }, &[x]))
    }

    /// Affine layer normalization; `gain` and `bias` broadcast against `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let s = self.mul(n, gain)?;
        self.add(s, bias)
    }

    /// Softmax over the last axis with a constant additive mask.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let value = kernels::masked_softmax(self.value(logits), mask)?;
        Ok(self.push(value, Op::Softmax(logits), &[logits]))
    }

    /// Euclidean norm over the last axis, keeping it as a length-1 axis.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        let norms = kernels::row_norms(xv);
        let value = Tensor::new(shape, norms).expect("row_norm shape");
        self.push(value, Op::RowNorm(x), &[x])
    }

    /// Partial rotary embedding of the rows along axis -2 at the given positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], r: usize, base: f64) -> Result<Var> {
        let value = kernels::rope_rows(self.value(x), positions, r, base, 1.0)?;
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                r,
                base,
            },
            &[x],
        ))
    }

    // ---- structural --------------------------------------------------

    /// Row `t` of the output is row `t-1` of the input; row 0 is copied.
    pub fn shift_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (batch, n, d) = split_rows(xv.shape());
        let mut value = xv.clone();
        {
            let src = xv.data();
            let out = value.data_mut();
            for b in 0..batch {
                for t in 1..n {
                    let o = (b * n + t) * d;
                    out[o..o + d].copy_from_slice(&src[o - d..o]);
                }
            }
        }
        self.push(value, Op::ShiftRows(x), &[x])
    }

    /// Concatenation along axis -2.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        let (batch, _, d) = split_rows(&first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let (pb, pn, pd) = split_rows(s);
            if pb != batch || pd != d || s.len() != first.len() || s[..s.len().saturating_sub(2)] != first[..first.len().saturating_sub(2)] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += pn;
        }
        let mut shape = first.clone();
        let r = shape.len();
        if r < 2 {
            return dim_err("concat_rows", "inputs need rank >= 2");
        }
        shape[r - 2] = total;
        let mut data = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for &p in parts {
                let pv = self.value(p);
                let pn = pv.axis_rows();
                data.extend_from_slice(&pv.data()[b * pn * d..(b + 1) * pn * d]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `[start, end)` along axis -2.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (batch, n, d) = split_rows(xv.shape());
        if xv.rank() < 2 || start > end || end > n {
            return dim_err(
                "slice_rows",
                format!("range {start}..{end} on shape {:?}", xv.shape()),
            );
        }
        let k = end - start;
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = k;
        let mut data = Vec::with_capacity(batch * k * d);
        for b in 0..batch {
            data.extend_from_slice(&xv.data()[(b * n + start) * d..(b * n + end) * d]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Gathers rows along axis -2. `index` holds `k` row indices per batch
    /// element, batch-major.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (batch, n, d) = split_rows(xv.shape());
        if xv.rank() < 2 || index.len() % batch != 0 {
            return dim_err(
                "gather_rows",
                format!("{} indices for batch {batch} of shape {:?}", index.len(), xv.shape()),
            );
        }
        let k = index.len() / batch;
        let mut data = Vec::with_capacity(index.len() * d);
        for b in 0..batch {
            for &i in &index[b * k..(b + 1) * k] {
                if i >= n {
                    return dim_err("gather_rows", format!("row {i} out of range {n}"));
                }
                data.extend_from_slice(&xv.data()[(b * n + i) * d..(b * n + i + 1) * d]);
            }
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = k;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `out = base; out[b, index[b, j]] += src[b, j]` along axis -2.
    pub fn index_add_rows(&mut self, base: Var, src: Var, index: &[usize]) -> Result<Var> {
        let bv = self.value(base);
        let sv = self.value(src);
        let (batch, n, d) = split_rows(bv.shape());
        let (sb, k, sd) = split_rows(sv.shape());
        if sb != batch || sd != d || index.len() != batch * k {
            return Err(Error::ShapeMismatch {
                op: "index_add_rows",
                lhs: bv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let mut value = bv.clone();
        {
            let out = value.data_mut();
            let src_d = sv.data();
            for b in 0..batch {
                for j in 0..k {
                    let i = index[b * k + j];
                    if i >= n {
                        return dim_err("index_add_rows", format!("row {i} out of range {n}"));
                    }
                    let o = (b * n + i) * d;
                    let s = (b * k + j) * d;
                    for c in 0..d {
                        out[o + c] += src_d[s + c];
                    }
                }
            }
        }
        Ok(self.push(
            value,
            Op::IndexAddRows {
                base,
                src,
                index: index.to_vec(),
            },
            &[base, src],
        ))
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return dim_err("swap_axes01", format!("expected rank 3, got {:?}", xv.shape()));
        }
        let value = swap01(xv);
        Ok(self.push(value, Op::SwapAxes01(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::of(xv.numel() as f64));
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Mean token cross-entropy of `[T, V]` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return dim_err(
                "cross_entropy",
                format!("logits {:?} vs {} targets", lv.shape(), targets.len()),
            );
        }
        let vocab = lv.shape()[1];
        let probs = kernels::masked_softmax(lv, None)?;
        let mut total = T::zero();
        for (t, &y) in targets.iter().enumerate() {
            if y >= vocab {
                return Err(Error::TokenOutOfRange { id: y, vocab });
            }
            let row = lv.row(t);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / T::of(targets.len() as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let same = av.shape() == bv.shape();
                let mut ga = self.wants(*a).then(|| Tensor::zeros(av.shape().to_vec()));
                let mut gb = self.wants(*b).then(|| Tensor::zeros(bv.shape().to_vec()));
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut visit = |o: usize, ia: usize, ib: usize| {
                    let (x, y, go) = (ad[ia], bd[ib], gd[o]);
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(t) = ga.as_mut() {
                        t.data_mut()[ia] += da;
                    }
                    if let Some(t) = gb.as_mut() {
                        t.data_mut()[ib] += db;
                    }
                };
                if same {
                    for o in 0..gd.len() {
                        visit(o, o, o);
                    }
                } else {
                    let shape = broadcast_shape(av.shape(), bv.shape(), "backward").expect("checked in forward");
                    let sa = broadcast_strides(av.shape(), &shape);
                    let sb = broadcast_strides(bv.shape(), &shape);
                    for_each_broadcast(&shape, &sa, &sb, visit);
                }
                if let Some(t) = ga {
                    accumulate(grads, *a, t);
                }
                if let Some(t) = gb {
                    accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Activation(a, kind) => {
                let av = self.value(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &go)| go * kind.derivative(z))
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data).expect("shape"));
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&z, &go)| if z > *floor { go } else { T::zero() })
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data).expect("shape"));
            }
            Op::Matmul { a, b, ta, tb } => self.matmul_backward(*a, *b, *ta, *tb, g, grads),
            Op::Normalize { x, inv_std } => {
                let d = out.last_dim();
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = Tensor::zeros(out.shape().to_vec());
                for (r, ((gr, yr), dx)) in g
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for c in 0..d {
                        dx[c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut gx = Tensor::zeros(out.shape().to_vec());
                for ((gr, yr), dx) in g
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                {
                    let s = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..d {
                        dx[c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for (r, (xr, dx)) in xv.data().chunks(d).zip(gx.data_mut().chunks_mut(d)).enumerate() {
                    let n = out.data()[r];
                    if n > T::zero() {
                        let s = g.data()[r] / n;
                        for c in 0..d {
                            dx[c] = s * xr[c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Rope { x, positions, r, base } => {
                let gx = kernels::rope_rows(g, positions, *r, *base, -1.0).expect("checked in forward");
                accumulate(grads, *x, gx);
            }
            Op::ShiftRows(x) => {
                let (batch, n, d) = split_rows(out.shape());
                let mut gx = Tensor::zeros(out.shape().to_vec());
                let (gd, xd) = (g.data(), gx.data_mut());
                for b in 0..batch {
                    for t in 0..n {
                        let src = (b * n + t) * d;
                        let dst = (b * n + t.saturating_sub(1)) * d;
                        for c in 0..d {
                            xd[dst + c] += gd[src + c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let (batch, total, d) = split_rows(out.shape());
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let pn = pv.axis_rows();
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(pv.numel());
                        for b in 0..batch {
                            let s = (b * total + offset) * d;
                            gp.extend_from_slice(&g.data()[s..s + pn * d]);
                        }
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), gp).expect("shape"));
                    }
                    offset += pn;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let (batch, n, d) = split_rows(xv.shape());
                let k = out.axis_rows();
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                for b in 0..batch {
                    let dst = (b * n + start) * d;
                    gx.data_mut()[dst..dst + k * d].copy_from_slice(&g.data()[b * k * d..(b + 1) * k * d]);
                }
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let (batch, n, d) = split_rows(xv.shape());
                let k = index.len() / batch;
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                let xd = gx.data_mut();
                for b in 0..batch {
                    for j in 0..k {
                        let dst = (b * n + index[b * k + j]) * d;
                        let src = (b * k + j) * d;
                        for c in 0..d {
                            xd[dst + c] += g.data()[src + c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::IndexAddRows { base, src, index } => {
                if self.wants(*base) {
                    accumulate(grads, *base, g.clone());
                }
                if self.wants(*src) {
                    let sv = self.value(*src);
                    let (batch, k, d) = split_rows(sv.shape());
                    let n = out.axis_rows();
                    let mut gs = Vec::with_capacity(sv.numel());
                    for b in 0..batch {
                        for j in 0..k {
                            let o = (b * n + index[b * k + j]) * d;
                            gs.extend_from_slice(&g.data()[o..o + d]);
                        }
                    }
                    accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), gs).expect("shape"));
                }
            }
            Op::SwapAxes01(x) => accumulate(grads, *x, swap01(g)),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                accumulate(grads, *x, g.clone().reshape(shape).expect("shape"));
            }
            Op::SumAll(x) => {
                let go = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), go));
            }
            Op::MeanAll(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), g.data()[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / T::of(targets.len() as f64);
                let mut gl = probs.map(|p| p * scale);
                for (t, &y) in targets.iter().enumerate() {
                    gl.row_mut(t)[y] -= scale;
                }
                accumulate(grads, *logits, gl);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = matmul_dims(av.shape(), bv.shape(), ta, tb).expect("checked in forward");
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let (sa, sb, sc) = (m * k, k * n, m * n);
        if self.wants(a) {
            let mut ga = Tensor::zeros(av.shape().to_vec());
            for bi in 0..dims.batch {
                let bo = if dims.b_batched { bi * sb } else { 0 };
                let gblk = &g.data()[bi * sc..(bi + 1) * sc];
                let bblk = &bv.data()[bo..bo + sb];
                let dst = &mut ga.data_mut()[bi * sa..(bi + 1) * sa];
                if ta {
                    // dA (k x m) = op(B) (k x n) * G^T
                    gemm(k, n, m, T::one(), bblk, tb, gblk, true, T::zero(), dst);
                } else {
                    // dA (m x k) = G * op(B)^T
                    gemm(m, n, k, T::one(), gblk, false, bblk, !tb, T::zero(), dst);
                }
            }
            accumulate(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = Tensor::zeros(bv.shape().to_vec());
            for bi in 0..dims.batch {
                let bo = if dims.b_batched { bi * sb } else { 0 };
                let beta = if dims.b_batched || bi == 0 { T::zero() } else { T::one() };
                let gblk = &g.data()[bi * sc..(bi + 1) * sc];
                let ablk = &av.data()[bi * sa..(bi + 1) * sa];
                let dst = &mut gb.data_mut()[bo..bo + sb];
                if tb {
                    // dB (n x k) = G^T * op(A)
                    gemm(n, m, k, T::one(), gblk, true, ablk, ta, beta, dst);
                } else {
                    // dB (k x n) = op(A)^T * G
                    gemm(k, m, n, T::one(), ablk, !ta, gblk, false, beta, dst);
                }
            }
            accumulate(grads, b, gb);
        }
    }
}

fn swap01<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (a, b, c) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.numel());
    for j in 0..b {
        for i in 0..a {
            let o = (i * b + j) * c;
            out.extend_from_slice(&x.data()[o..o + c]);
        }
    }
    Tensor::new(vec![b, a, c], out).expect("swap shape")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

    fn loss_of(inputs: &[Tensor<f64>], build: &Build) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data()[0]
    }

    /// Worst relative error between analytic and central-difference gradients.
    fn fd_check(inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (i, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
            for j in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (loss_of(&plus, build) - loss_of(&minus, build)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Contracts `out` against a fixed random tensor so every element matters.
    fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
        let w = g.constant(rand(g.shape(out), seed));
        let p = g.mul(out, w)?;
        Ok(g.sum_all(p))
    }

    fn assert_grad(inputs: Vec<Tensor<f64>>, build: &Build) {
        let worst = fd_check(inputs, build);
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn square_golden() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let p = g.param(Tensor::scalar(1.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn broadcasting_binaries() {
        assert_grad(vec![rand(&[2, 3, 4], 1), rand(&[3, 1], 2)], &|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[1])?;
            let c = g.sub(b, v[0])?;
            project(g, c, 3)
        });
        let denom = rand(&[4], 5).map(|x| x.abs() + 1.0);
        assert_grad(vec![rand(&[2, 4], 4), denom], &|g, v| {
            let d = g.div(v[0], v[1])?;
            project(g, d, 6)
        });
    }

    #[test]
    fn scalar_ops_and_activations() {
        for kind in [Activation::Elu, Activation::ReluSquared, Activation::Sigmoid] {
            assert_grad(vec![rand(&[3, 5], 7)], &move |g, v| {
                let s = g.scale(v[0], 1.7);
                let s = g.add_scalar(s, 0.3);
                let a = g.activation(s, kind);
                project(g, a, 8)
            });
        }
        let away = rand(&[10], 9).map(|x| if x.abs() < 0.1 { x + 0.5 } else { x });
        assert_grad(vec![away], &|g, v| {
            let c = g.clamp_min(v[0], 0.0);
            project(g, c, 10)
        });
    }

    #[test]
    fn matmul_variants() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand(&[2, 4, 3], 11) } else { rand(&[2, 3, 4], 11) };
            let b = if tb { rand(&[2, 5, 4], 12) } else { rand(&[2, 4, 5], 12) };
            assert_grad(vec![a, b], &move |g, v| {
                let m = g.matmul_ex(v[0], v[1], ta, tb)?;
                project(g, m, 13)
            });
        }
        assert_grad(vec![rand(&[2, 3, 4], 14), rand(&[4, 2], 15)], &|g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, 16)
        });
    }

    #[test]
    fn normalization_and_softmax() {
        assert_grad(vec![rand(&[2, 3, 6], 17), rand(&[2, 1, 6], 18), rand(&[2, 1, 6], 19)], &|g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, n, 20)
        });
        let mask = Tensor::from_fn([3, 4], |i| if i % 4 <= i / 4 + 1 { 0.0 } else { f64::NEG_INFINITY });
        assert_grad(vec![rand(&[2, 3, 4], 21)], &move |g, v| {
            let s = g.masked_softmax(v[0], Some(&mask))?;
            project(g, s, 22)
        });
        assert_grad(vec![rand(&[3, 4], 23)], &|g, v| {
            let n = g.row_norm(v[0]);
            project(g, n, 24)
        });
    }

    #[test]
    fn rope_gradient() {
        assert_grad(vec![rand(&[2, 3, 6], 25)], &|g, v| {
            let r = g.rope(v[0], &[0, 7, 100], 4, 10_000.0)?;
            project(g, r, 26)
        });
    }

    #[test]
    fn structural_ops() {
        assert_grad(vec![rand(&[2, 4, 3], 27)], &|g, v| {
            let s = g.shift_rows(v[0]);
            project(g, s, 28)
        });
        assert_grad(vec![rand(&[2, 2, 3], 29), rand(&[2, 3, 3], 30)], &|g, v| {
            let c = g.concat_rows(&[v[0], v[1], v[0]])?;
            let s = g.slice_rows(c, 1, 6)?;
            project(g, s, 31)
        });
        assert_grad(vec![rand(&[2, 4, 3], 32)], &|g, v| {
            let r = g.gather_rows(v[0], &[3, 0, 3, 1, 1, 2])?;
            project(g, r, 33)
        });
        assert_grad(vec![rand(&[2, 3, 2], 34), rand(&[2, 4, 2], 35)], &|g, v| {
            let r = g.index_add_rows(v[0], v[1], &[2, 2, 0, 1, 1, 1, 0, 2])?;
            project(g, r, 36)
        });
        assert_grad(vec![rand(&[2, 3, 4], 37)], &|g, v| {
            let s = g.swap_axes01(v[0])?;
            let r = g.reshape(s, &[6, 4])?;
            project(g, r, 38)
        });
    }

    #[test]
    fn reductions_and_cross_entropy() {
        assert_grad(vec![rand(&[3, 4], 39)], &|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean_all(sq))
        });
        assert_grad(vec![rand(&[4, 6], 40)], &|g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]));
    }

    #[test]
    fn cross_entropy_uniform_golden() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::<f64>::zeros([2, 4]));
        let loss = g.cross_entropy(l, &[1, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(l, &[4, 0]).is_err());
    }
}

//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! addressed by the copyable [`Var`] handle. After the forward pass,
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! accumulated gradient of every node that requires one.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Floor applied inside `log` and the binary cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n×d] + [d]` row broadcast
    AddRow(Var, Var),
    /// `[n×d] ⊙ [d]` row broadcast
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

/// Kept strictly inside `(0, 1)`: saturated logits land on the nearest
/// representable value instead of 0 or 1.
fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    stable_sigmoid(x)
}

/// Clamped binary cross-entropy of probability `p` against target `y`.
pub fn bce(y: f64, p: f64) -> f64 {
    let lp = p.max(LOG_FLOOR).ln();
    let lq = (1.0 - p).max(LOG_FLOOR).ln();
    -(y * lp + (1.0 - y) * lq)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected matrix, got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_nt", a)?;
        let (n, k2) = self.mat_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push(
            "matmul_nt",
            Tensor::new(vec![m, n], out)?,
            Op::MatMulNt(a, b),
            &[a, b],
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(r));
        let d = vx.cols();
        if vr.len() != d || vx.ndim() == 0 {
            return Err(mismatch(name, vx.shape(), vr.shape()));
        }
        let rv = vr.data();
        let data = vx
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, t, op, &[x, r])
    }

    /// Adds a length-`d` vector to every row of an `[n×d]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push("exp", t, Op::Exp(x), &[x])
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push("log", t, Op::Log(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(stable_sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardisation (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        if d == 0 {
            return Err(Error::EmptyInput("layer_norm_rows"));
        }
        let mut data = vx.data().to_vec();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("layer_norm_rows", t, Op::LayerNormRows { x, inv_std }, &[x])
    }

    /// Elementwise clamped binary cross-entropy of probabilities `p` against a
    /// constant target of the same shape.
    pub fn bce(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(mismatch("bce", vp.shape(), target.shape()));
        }
        let data = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pp, &y)| bce(y, pp))
            .collect();
        let t = Tensor::new(vp.shape().to_vec(), data)?;
        self.push(
            "bce",
            t,
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let m = vx.sum() / vx.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.mat_dims("transpose", x)?;
        let t = self.value(x).transpose();
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat_dims("slice_cols", x)?;
        if start > end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{end} of {c} columns"),
            });
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&vx.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], data)?;
        self.push("slice_cols", t, Op::SliceCols { x, start }, &[x])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat_dims("slice_rows", x)?;
        if start > end || end > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{start}..{end} of {r} rows"),
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let r = self.mat_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat_dims("concat_cols", p)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let c = self.mat_dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.mat_dims("concat_rows", p)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pr;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} of {r}"),
            });
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(vx.row(i));
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from a scalar loss. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 || loss_shape.len() > 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ, a: m×k, b: n×k
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), false, &mut da, false);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap());
                }
                if wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), true, va.data(), false, &mut db, false);
                    acc(*b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    acc(*a, zip_map(g, vb, |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_map(g, va, |x, y| x * y));
                }
            }
            Op::AddRow(x, r) => {
                if wants(*x) {
                    acc(*x, g.clone());
                }
                if wants(*r) {
                    let d = g.cols();
                    let mut dr = vec![0.0; d];
                    for row in g.data().chunks(d.max(1)) {
                        dr.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(*r, Tensor::new(self.shape(*r).to_vec(), dr).unwrap());
                }
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (self.value(*x), self.value(*r));
                let d = vx.cols();
                if wants(*x) {
                    let data = g
                        .data()
                        .chunks(d.max(1))
                        .flat_map(|row| row.iter().zip(vr.data()).map(|(a, b)| a * b))
                        .collect();
                    acc(*x, Tensor::new(vx.shape().to_vec(), data).unwrap());
                }
                if wants(*r) {
                    let mut dr = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d.max(1)).zip(vx.data().chunks(d.max(1))) {
                        for j in 0..d {
                            dr[j] += grow[j] * xrow[j];
                        }
                    }
                    acc(*r, Tensor::new(vr.shape().to_vec(), dr).unwrap());
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, zip_map(g, out, |a, b| a * b)),
            Op::Log(x) => {
                let vx = self.value(*x);
                acc(
                    *x,
                    zip_map(g, vx, |a, v| if v > LOG_FLOOR { a / v } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => acc(*x, zip_map(g, out, |a, s| a * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, zip_map(g, out, |a, t| a * (1.0 - t * t))),
            Op::Relu(x) => acc(*x, zip_map(g, out, |a, o| if o > 0.0 { a } else { 0.0 })),
            Op::SoftmaxRows(x) => {
                let d = out.cols().max(1);
                let mut dx = Vec::with_capacity(out.len());
                for (grow, srow) in g.data().chunks(d).zip(out.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(srow).map(|(a, s)| s * (a - dot)));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNormRows { x, inv_std } => {
                let d = out.cols();
                let n = d as f64;
                let mut dx = Vec::with_capacity(out.len());
                for ((grow, yrow), is) in g.data().chunks(d).zip(out.data().chunks(d)).zip(inv_std)
                {
                    let mg = grow.iter().sum::<f64>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    dx.extend(grow.iter().zip(yrow).map(|(a, y)| is * (a - mg - y * mgy)));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::Bce { p, target } => {
                let vp = self.value(*p);
                let data = g
                    .data()
                    .iter()
                    .zip(vp.data())
                    .zip(target)
                    .map(|((a, &pp), &y)| {
                        let d1 = if pp > LOG_FLOOR { -y / pp } else { 0.0 };
                        let d2 = if 1.0 - pp > LOG_FLOOR {
                            (1.0 - y) / (1.0 - pp)
                        } else {
                            0.0
                        };
                        a * (d1 + d2)
                    })
                    .collect();
                acc(*p, Tensor::new(vp.shape().to_vec(), data).unwrap());
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::filled(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.data()[0] / n;
                acc(*x, Tensor::filled(self.shape(*x).to_vec(), gv));
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::SliceCols { x, start } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                let w = out.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*x, Tensor::new(vec![r, c], dx).unwrap());
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, Tensor::new(vx.shape().to_vec(), dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        acc(p, Tensor::new(vec![r, w], dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if wants(p) {
                        let dp = g.data()[offset..offset + n].to_vec();
                        acc(p, Tensor::new(self.shape(p).to_vec(), dp).unwrap());
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::Bce { .. } => "bce",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Transpose(..) => "transpose",
        Op::SliceCols { .. } => "slice_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert!(sigmoid(-800.0) > 0.0);
        assert!(sigmoid(40.0) < 1.0);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn overflow_is_detected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x =
            g.constant(Tensor::from_rows(&[vec![1.0, -3.0, 40.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        for r in g.value(s).to_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

//! The recording tape.
//!
//! Each call on [`Graph`] evaluates one operation eagerly and appends a node
//! holding its value and the handles of its inputs. Nodes are only ever
//! appended, so node order is a valid topological order and the reverse pass
//! is a single backwards sweep.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::params::{Gradients, ParameterSet};
use crate::{shape_err, DiffError, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Affine { x: Var, scale: Vec<f64> },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Tile(Var),
    LogSoftmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    RowNorm(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Tile(_) => "tile",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::RowNorm(_) => "row_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager computation record with reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters enter as constants: nothing is
    /// differentiable, which skips gradient bookkeeping for evaluation.
    pub fn inference() -> Self {
        Self { frozen: true, ..Self::default() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && !self.frozen;
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf bound to parameter `name`. Repeated calls return the same leaf so
    /// that every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        let v = self.push(t, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(shape_err("linear", format!("bias {:?} vs weight {ws:?}", self.shape(b))));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let xr = &xv[r * din..(r + 1) * din];
            for j in 0..dout {
                let wr = &wv[j * din..(j + 1) * din];
                let mut acc = bv.map_or(0.0, |b| b[j]);
                for k in 0..din {
                    acc += xr[k] * wr[k];
                }
                out[r * dout + j] = acc;
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { x, w, b }, rg))
    }

    /// `a: [n, k]` times `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (n, k, m) = (as_[0], as_[1], bs[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..m {
                    out[i * m + j] += aip * bv[p * m + j];
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a), a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    /// Per-column `x * scale + shift` with constant coefficients; the last
    /// dimension of `x` must match the coefficient length.
    pub fn affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if scale.len() != d || shift.len() != d {
            return Err(shape_err(
                "affine",
                format!("input {:?} vs coefficients {}/{}", self.shape(x), scale.len(), shift.len()),
            ));
        }
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v * scale[i % d] + shift[i % d]).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Affine { x, scale: scale.to_vec() }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside
    /// the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { x: a, lo, hi }, a, |x| x.clamp(lo, hi))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over everything but the leading dimension: `[n, ...] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, c) = (v.rows(), v.cols());
        let data = (0..n).map(|r| v.data()[r * c..(r + 1) * c].iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n, 1], data), Op::RowSum(a), rg)
    }

    /// Euclidean norm of each row: `[n, d] -> [n, 1]`. The gradient at a
    /// zero row is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (n, c) = (v.rows(), v.cols());
        let data = (0..n)
            .map(|r| v.data()[r * c..(r + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n, 1], data), Op::RowNorm(a), rg)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err("concat_cols", format!("operand {s:?} with {n} rows")));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(shape_err("slice_cols", format!("{start}..{} of {s:?}", start + len)));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&xv[r * s[1] + start..r * s[1] + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![s[0], len], out), Op::SliceCols { x, start }, rg))
    }

    /// Stack along the leading dimension; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("operand {s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(shape_err("slice_rows", format!("{start}..{} of {s:?}", start + len)));
        }
        let c = self.value(x).cols();
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Repeat `x` cyclically to fill `shape` (e.g. `[1, d] -> [n, d]`, or a
    /// single value to any shape).
    pub fn tile(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let m = self.value(x).numel();
        let n: usize = shape.iter().product();
        if n % m != 0 || shape.last() != self.shape(x).last() && m != 1 {
            return Err(shape_err("tile", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let xv = self.value(x).data();
        let data = (0..n).map(|i| xv[i % m]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Tile(x), rg))
    }

    /// Row-wise log-softmax of `[n, c]` logits.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("log_softmax", format!("expected rank 2, got {s:?}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for r in 0..s[0] {
            let row = &xv[r * s[1]..(r + 1) * s[1]];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * s[1]..(r + 1) * s[1]].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::LogSoftmax(x), rg))
    }

    /// Pick column `idx[r]` from row `r`: `[n, c] -> [n, 1]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err("gather", format!("{} indices into {s:?}", idx.len())));
        }
        let xv = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &i)| xv[r * s[1] + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![s[0], 1], data), Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    // ---- convolution ----------------------------------------------------

    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<ConvGeom> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err(op, format!("input {xs:?} weight {ws:?}")));
        }
        let (c_in, c_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != c_in || self.value(b).numel() != c_out {
            return Err(shape_err(
                op,
                format!("input {xs:?} weight {ws:?} bias {:?}", self.shape(b)),
            ));
        }
        let k = ws[2];
        let (h_out, w_out) = if transposed {
            let ho = ((xs[2] - 1) * stride + k).checked_sub(2 * pad);
            let wo = ((xs[3] - 1) * stride + k).checked_sub(2 * pad);
            match (ho, wo) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(shape_err(op, "padding exceeds output")),
            }
        } else {
            if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
                return Err(shape_err(op, format!("kernel {k} larger than padded input {xs:?}")));
            }
            ((xs[2] + 2 * pad - k) / stride + 1, (xs[3] + 2 * pad - k) / stride + 1)
        };
        Ok(ConvGeom { n: xs[0], c_in, h: xs[2], w: xs[3], c_out, k, stride, pad, h_out, w_out })
    }

    /// `x: [n, c_in, h, w]`, `w: [c_out, c_in, k, k]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, pad, false)?;
        let t = conv::conv2d(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `x: [n, c_in, h, w]`, `w: [c_in, c_out, k, k]`, `b: [c_out]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv_transpose2d", x, w, b, stride, pad, true)?;
        let t = conv::conv_transpose2d(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// First node (in evaluation order) holding a non-finite value.
    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()).map(|(i, n)| (i, n.op.name()))
    }

    /// Exact gradients of scalar `loss` for every entry of `params`.
    /// Parameters the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var, params: &ParameterSet) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            let (node, op) = self.first_non_finite().unwrap_or((loss.0, self.nodes[loss.0].op.name()));
            return Err(DiffError::NonFinite { op, node });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::zeros_like(params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise_grad(&self, x: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = xv.data().iter().zip(g.data()).map(|(&x, &g)| f(x, g)).collect();
        Tensor::from_parts(xv.shape().to_vec(), data)
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        params_out: &mut Gradients,
    ) {
        match op {
            Op::Constant => {}
            Op::Param(name) => {
                if let Some(slot) = params_out.grads.get_mut(name) {
                    slot.add_assign(&g);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                let gd = g.data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * din];
                    for r in 0..n {
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for j in 0..dout {
                            let gj = gd[r * dout + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let wr = &wv.data()[j * din..(j + 1) * din];
                            for k in 0..din {
                                dxr[k] += gj * wr[k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, din], dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; dout * din];
                    for r in 0..n {
                        let xr = &xv.data()[r * din..(r + 1) * din];
                        for j in 0..dout {
                            let gj = gd[r * dout + j];
                            if gj == 0.0 {
                                continue;
                            }
                            let dwr = &mut dw[j * din..(j + 1) * din];
                            for k in 0..din {
                                dwr[k] += gj * xr[k];
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(vec![dout, din], dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for r in 0..n {
                            for j in 0..dout {
                                db[j] += gd[r * dout + j];
                            }
                        }
                        let shape = self.shape(*b).to_vec();
                        self.accumulate(grads, *b, Tensor::from_parts(shape, db));
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let gd = g.data();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gd[i * m + j] * bv.data()[p * m + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += aip * gd[i * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = self.elementwise_grad(*b, &g, |y, g| y * g);
                let gb = self.elementwise_grad(*a, &g, |x, g| x * g);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Affine { x, scale } => {
                let d = scale.len();
                let data = g.data().iter().enumerate().map(|(i, v)| v * scale[i % d]).collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Tanh(a) => {
                let data = out.data().iter().zip(g.data()).map(|(y, g)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Sigmoid(a) => {
                let data = out.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Exp(a) => {
                let data = out.data().iter().zip(g.data()).map(|(y, g)| g * y).collect();
                self.accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::Log(a) => {
                let d = self.elementwise_grad(*a, &g, |x, g| g / x);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = self.elementwise_grad(*a, &g, |x, g| 2.0 * x * g);
                self.accumulate(grads, *a, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = self.elementwise_grad(*x, &g, |x, g| if x >= *lo && x <= *hi { g } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), g.item());
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let t = Tensor::full(self.shape(*a), g.item() / n);
                self.accumulate(grads, *a, t);
            }
            Op::RowSum(a) => {
                let xv = self.value(*a);
                let c = xv.cols();
                let data = (0..xv.numel()).map(|i| g.data()[i / c]).collect();
                self.accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::RowNorm(a) => {
                let xv = self.value(*a);
                let c = xv.cols();
                let data = xv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let norm = out.data()[i / c];
                        if norm > 0.0 {
                            g.data()[i / c] * x / norm
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::ConcatCols(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![n, w], d));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (n, c, len) = (s[0], s[1], out.cols());
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    d[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Tile(x) => {
                let xv = self.value(*x);
                let m = xv.numel();
                let mut d = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    d[i % m] += v;
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::LogSoftmax(x) => {
                let (n, c) = (out.rows(), out.cols());
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    let gs: f64 = g.data()[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        let i = r * c + j;
                        d[i] = g.data()[i] - out.data()[i].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c], d));
            }
            Op::Gather { x, idx } => {
                let s = self.shape(*x);
                let mut d = vec![0.0; s[0] * s[1]];
                for (r, &i) in idx.iter().enumerate() {
                    d[r * s[1] + i] = g.data()[r];
                }
                self.accumulate(grads, *x, Tensor::from_parts(s.to_vec(), d));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), &g, geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                let bshape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::from_parts(bshape, db.into_data()));
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), &g, geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                let bshape = self.shape(*b).to_vec();
                self.accumulate(grads, *b, Tensor::from_parts(bshape, db.into_data()));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(entries: &[(&str, Tensor)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (k, v) in entries {
            p.insert(*k, v.clone());
        }
        p
    }

    #[test]
    fn sum_of_squares() {
        let ps = params(&[("w", Tensor::row(&[1.0, 2.0]))]);
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let sq = g.square(w);
        let loss = g.sum(sq);
        let grads = g.backward(loss, &ps).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_parameter_gets_exact_zero() {
        let ps = params(&[("w", Tensor::row(&[1.0, 2.0])), ("p", Tensor::row(&[3.0]))]);
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let _p = g.param(&ps, "p").unwrap();
        let loss = g.sum(w);
        let grads = g.backward(loss, &ps).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_finite_loss_names_the_operation() {
        let ps = params(&[("w", Tensor::row(&[-1.0]))]);
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let l = g.log(w);
        let loss = g.sum(l);
        match g.backward(loss, &ps) {
            Err(DiffError::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0, 2.0]));
        let b = g.constant(Tensor::row(&[1.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[1, 1]"), "{err}");
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let ps = params(&[("w", Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.3, 0.7, 0.2, -0.9]).unwrap())]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let w = g.param(&ps, "w").unwrap();
        let h = g.linear(x, w, None).unwrap();
        let t = g.tanh(h);
        let loss = g.mean(t);
        let a = g.backward(loss, &ps).unwrap();
        let b = g.backward(loss, &ps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_output_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 16, 16]));
        let w = g.constant(Tensor::zeros(&[16, 4, 4, 4]));
        let b = g.constant(Tensor::zeros(&[16]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 8, 8]);
        let wt = g.constant(Tensor::zeros(&[16, 4, 4, 4]));
        let bt = g.constant(Tensor::zeros(&[4]));
        let z = g.conv_transpose2d(y, wt, bt, 2, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 4, 16, 16]);
    }
}

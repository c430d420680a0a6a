//! The computation record: an append-only list of nodes in topological order.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the adjoint. [`Graph::backward`] walks the list once in reverse,
//! accumulating adjoints into every node that requires them.

use crate::error::{AutodiffError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary op is broadcast over the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs holds a single element.
    Scalar,
    /// rhs matches the trailing dimension and repeats over rows.
    Row,
    /// rhs is `[m, 1]` and repeats over the columns of an `[m, n]` lhs.
    Col,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let rhs_len: usize = rhs.iter().product();
        let mismatch = || AutodiffError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs == rhs {
            return Ok(Self::Same);
        }
        if rhs_len == 1 {
            return Ok(Self::Scalar);
        }
        let last = *lhs.last().ok_or_else(mismatch)?;
        let rhs_is_row = match rhs {
            [n] => *n == last,
            [1, n] => *n == last,
            _ => false,
        };
        if rhs_is_row {
            return Ok(Self::Row);
        }
        if let ([m, _], [m2, 1]) = (lhs, rhs) {
            if m == m2 {
                return Ok(Self::Col);
            }
        }
        Err(mismatch())
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Row => i % cols,
            Self::Col => i / cols,
        }
    }

    /// Sums an lhs-shaped adjoint down to the rhs shape.
    fn reduce(self, g: &[f64], rhs_len: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rhs_len];
        for (i, &gv) in g.iter().enumerate() {
            out[self.index(i, cols)] += gv;
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation record.
///
/// A graph is confined to one worker for the lifetime of a training step.
/// Values can be read back with [`Graph::value`] and adjoints with
/// [`Graph::grad`] after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that receives an adjoint during [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Clears every accumulated adjoint.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().map_err(|_| AutodiffError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, rg, Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = Bcast::resolve(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.last_dim();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[bc.index(i, cols)]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, make(a, b, bc)))
    }

    /// `a + b`, with `b` broadcast as a scalar, a trailing row, or an `[m, 1]` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, rg, op)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// Elementwise clamp to `[lo, hi]`; the adjoint is zero where clamping bites.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log. Zero and negative entries are rejected; NaN passes
    /// through so that callers can apply their own non-finite policy.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= 0.0)
        {
            return Err(AutodiffError::NonPositiveLog { index, value });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Softmax over the trailing dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.last_dim();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, rg, Op::Softmax(a))
    }

    /// Normalizes each trailing row to zero mean and unit (biased) variance,
    /// then applies `gain` and `bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in [gain, bias] {
            let s = self.shape(p);
            if s.iter().product::<usize>() != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = var + eps;
            let rs = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(AutodiffError::OutOfBounds {
                start,
                end: start + len,
                size: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, rg, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start + len > r {
            return Err(AutodiffError::OutOfBounds {
                start,
                end: start + len,
                size: r,
            });
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, c], out)?, rg, Op::SliceRows(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let (r, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Sums the trailing dimension, keeping it as size 1.
    pub fn sum_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let out: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(l) => *l = 1,
            None => shape.push(1),
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).expect("reduced shape"), rg, Op::SumLastDim(a))
    }

    /// Reverse sweep from a scalar `root`, accumulating into every node that
    /// requires an adjoint. Adjoints add across repeated calls until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(AutodiffError::NotScalar(rv.shape().to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        add_into(&mut self.nodes[root.0].grad, vec![1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

fn send(nodes: &mut [Node], v: Var, contrib: Vec<f64>) {
    let n = &mut nodes[v.0];
    if n.requires_grad {
        add_into(&mut n.grad, contrib);
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match *op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("rank 2");
            let n = out.last_dim();
            if wants(nodes, a) {
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, nodes[b.0].value.data(), &mut da, m, n, k);
                send(nodes, a, da);
            }
            if wants(nodes, b) {
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn_acc(nodes[a.0].value.data(), g, &mut db, m, k, n);
                send(nodes, b, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2().expect("rank 2");
            send(nodes, a, kernels::transpose(g, r, c));
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
            if wants(nodes, a) {
                send(nodes, a, g.to_vec());
            }
            if wants(nodes, b) {
                let mut db = bc.reduce(g, nodes[b.0].value.numel(), out.last_dim());
                if sign < 0.0 {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                send(nodes, b, db);
            }
        }
        Op::Mul(a, b, bc) => {
            let cols = out.last_dim();
            if wants(nodes, a) {
                let bv = nodes[b.0].value.data();
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * bv[bc.index(i, cols)])
                    .collect();
                send(nodes, a, da);
            }
            if wants(nodes, b) {
                let prod: Vec<f64> = g
                    .iter()
                    .zip(nodes[a.0].value.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                let db = bc.reduce(&prod, nodes[b.0].value.numel(), cols);
                send(nodes, b, db);
            }
        }
        Op::Div(a, b, bc) => {
            let cols = out.last_dim();
            if wants(nodes, a) {
                let bv = nodes[b.0].value.data();
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv / bv[bc.index(i, cols)])
                    .collect();
                send(nodes, a, da);
            }
            if wants(nodes, b) {
                let bv = nodes[b.0].value.data();
                let prod: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| -gv * out.data()[i] / bv[bc.index(i, cols)])
                    .collect();
                let db = bc.reduce(&prod, nodes[b.0].value.numel(), cols);
                send(nodes, b, db);
            }
        }
        Op::Affine(a, s) => send(nodes, a, g.iter().map(|v| v * s).collect()),
        Op::Clamp(a, lo, hi) => {
            let da = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gv, &x)| if x < lo || x > hi { 0.0 } else { *gv })
                .collect();
            send(nodes, a, da);
        }
        Op::Sigmoid(a) => {
            let da = g
                .iter()
                .zip(out.data())
                .map(|(gv, y)| gv * y * (1.0 - y))
                .collect();
            send(nodes, a, da);
        }
        Op::Exp(a) => {
            let da = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
            send(nodes, a, da);
        }
        Op::Log(a) => {
            let da = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gv, x)| gv / x)
                .collect();
            send(nodes, a, da);
        }
        Op::Softplus(a) => {
            let da = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gv, &x)| gv * sigmoid(x))
                .collect();
            send(nodes, a, da);
        }
        Op::Gelu(a) => {
            let da = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(gv, &x)| gv * gelu_grad(x))
                .collect();
            send(nodes, a, da);
        }
        Op::Softmax(a) => {
            let n = out.last_dim();
            let mut da = vec![0.0; g.len()];
            for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let inner = kernels::dot(gr, yr);
                for c in 0..n {
                    dr[c] = yr[c] * (gr[c] - inner);
                }
            }
            send(nodes, a, da);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref xhat,
            ref rstd,
        } => {
            let d = out.last_dim();
            let gv = nodes[gain.0].value.data().to_vec();
            if wants(nodes, gain) || wants(nodes, bias) {
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                }
                send(nodes, gain, dg);
                send(nodes, bias, db);
            }
            if wants(nodes, x) {
                let mut dx = vec![0.0; g.len()];
                let inv_d = 1.0 / d as f64;
                for (r, ((dr, gr), hr)) in dx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        dr[c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                send(nodes, x, dx);
            }
        }
        Op::SliceCols(x, start) => {
            let (r, c) = nodes[x.0].value.dims2().expect("rank 2");
            let len = out.last_dim();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            send(nodes, x, dx);
        }
        Op::SliceRows(x, start) => {
            let (r, c) = nodes[x.0].value.dims2().expect("rank 2");
            let mut dx = vec![0.0; r * c];
            dx[start * c..start * c + g.len()].copy_from_slice(g);
            send(nodes, x, dx);
        }
        Op::ConcatCols(ref parts) => {
            let (r, total) = out.dims2().expect("rank 2");
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.last_dim();
                if wants(nodes, p) {
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    send(nodes, p, dp);
                }
                offset += w;
            }
        }
        Op::ConcatRows(ref parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if wants(nodes, p) {
                    send(nodes, p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            send(nodes, a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            send(nodes, a, vec![g[0] / n as f64; n]);
        }
        Op::SumLastDim(a) => {
            let n = nodes[a.0].value.last_dim();
            let da = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect();
            send(nodes, a, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let e = g.constant(mat(1, 2, &[1.0, 0.0]));
        let v = g.constant(mat(2, 1, &[5.0, 7.0]));
        let p = g.matmul(e, v).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softplus_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 50.0, -20.0]));
        let y = g.softplus(x);
        let v = g.value(y).data();
        assert!(close(v[0], std::f64::consts::LN_2, 1e-12));
        assert!(close(v[1], 50.0, 1e-12));
        assert!(close(v[2], 2.0612e-9, 1e-13));
        assert!(v.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 3, &[0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]));
        let y = g.softmax_lastdim(x);
        let v = g.value(y).data();
        for &p in &v[..3] {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        assert!(close(v[3], 1.0, 1e-12));
        assert!(v[4] < 1e-12 && v[5] < 1e-12);
        for row in v.chunks(3) {
            assert!(close(row.iter().sum(), 1.0, 1e-9));
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(mat(1, 3, &[5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(mat(1, 2, &[1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 4, &[1.0, 3.0, -2.0, 7.0, 0.5, 0.25, 9.0, -4.0]));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -2.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!(close(g.value(s).data()[1], 0.119203, 1e-6));
        let m = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let mean = g.mean(m);
        assert_eq!(g.value(mean).item(), 2.5);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(
            g.log(x).unwrap_err(),
            AutodiffError::NonPositiveLog {
                index: 1,
                value: 0.0
            }
        );
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = g.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let col = g.constant(mat(2, 1, &[100.0, 200.0]));
        let s = g.constant(Tensor::scalar(0.5));
        let r = g.add(a, row).unwrap();
        assert_eq!(g.value(r).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let c = g.add(a, col).unwrap();
        assert_eq!(g.value(c).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
        let m = g.mul(a, s).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.exp(w);
        assert_eq!(g.backward(y).unwrap_err(), AutodiffError::NotScalar(vec![2]));
    }

    #[test]
    fn diamond_sums_path_contributions() {
        // root = sum(exp(w) * sigmoid(w)); two paths from w meet at the product.
        let mut g = Graph::new();
        let w = g.variable(Tensor::vector(vec![0.2, -0.7]));
        let a = g.exp(w);
        let b = g.sigmoid(w);
        let p = g.mul(a, b).unwrap();
        let root = g.sum(p);
        g.backward(root).unwrap();
        for (i, &x) in [0.2f64, -0.7].iter().enumerate() {
            let s = sigmoid(x);
            let via_exp = x.exp() * s;
            let via_sigmoid = x.exp() * s * (1.0 - s);
            assert!(close(g.grad(w).unwrap()[i], via_exp + via_sigmoid, 1e-15));
        }
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let w = g.variable(Tensor::vector(vec![3.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0]);
    }
}

//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive executed during a forward pass, in
//! execution order. Node ids are indices into that record, so every input
//! precedes its consumer and a single reverse sweep computes all gradients.

use std::sync::Arc;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, pairwise_sum, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask of allowed entries for [`Graph::softmax_masked`], same shape as
/// the scores. Shared between heads, hence the `Arc`.
pub type Mask = Arc<Vec<bool>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) => vec![*a, *b],
            ScaleBy(a, b) | AddScalar(a, b) => vec![*a, *b],
            MulConst(a, _) | Scale(a, _) | Exp(a) | Gelu(a) | LogSigmoid(a) => vec![*a],
            Softmax(a) | L2Normalize(a, _) | SliceCols(a, _) | GatherRows(a, _) | Sum(a) => {
                vec![*a]
            }
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            ConcatCols(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `x·Φ(x)` with the exact error-function CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// `log(1/(1+exp(-x)))`, stable for any finite `x`.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (non-differentiable) tensor.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(a), c.shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// Adds the scalar node `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("add_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x + sv);
        Ok(self.push(out, Op::AddScalar(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid_scalar);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a), None);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise softmax restricted to `mask`-allowed entries; disallowed
    /// entries are exactly zero, and a row with no allowed entry is all zeros.
    pub fn softmax_masked(&mut self, a: Var, mask: Mask) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape(
                "softmax_masked",
                self.shape(a),
                &[mask.len()],
            ));
        }
        let out = softmax_rows(self.value(a), Some(&mask));
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).clone();
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Contract(format!(
                    "cannot normalize row {i} with norm {nrm}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms[i] = nrm;
        }
        Ok(self.push(out, Op::L2Normalize(x, norms)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Empty("concat_cols inputs"));
        };
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims(x);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(m, total, out), Op::ConcatCols(xs.to_vec())))
    }

    /// Builds a matrix whose `r`-th row is row `index[r]` of `x`. Rows may
    /// repeat; gradients are scattered back with accumulation.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if index.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in &index {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rows = index.len();
        Ok(self.push(Tensor::matrix(rows, n, out), Op::GatherRows(x, index)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = pairwise_sum(self.value(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`. Every leaf created with
    /// `requires_grad` receives a gradient buffer, zero when unreachable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(node.value.shape()));
                    }
                } else {
                    grads[i] = None;
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = bv.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(dy.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(av.data(), dy.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2();
                let n = bv.rows();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(dy.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(dy.data(), av.data(), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*bias) {
                    let (m, n) = dy.dims2();
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for (d, g) in db.iter_mut().zip(&dy.data()[i * n..(i + 1) * n]) {
                            *d += g;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.wants(*a) {
                    let d = dy.data().iter().zip(bv.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.wants(*b) {
                    let d = dy.data().iter().zip(av.data()).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::MulConst(a, c) => {
                let d = dy.data().iter().zip(c.data()).map(|(g, v)| g * v).collect();
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, d).unwrap());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.map(|g| g * sv));
                }
                if self.wants(*s) {
                    let prods: Vec<f64> = dy
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    let shape = self.value(*s).shape().to_vec();
                    let ds = Tensor::new(shape, vec![pairwise_sum(&prods)]).unwrap();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, dy.clone());
                if self.wants(*s) {
                    let shape = self.value(*s).shape().to_vec();
                    let ds = Tensor::new(shape, vec![pairwise_sum(dy.data())]).unwrap();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Exp(a) => {
                let d = dy.data().iter().zip(y.data()).map(|(g, v)| g * v).collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| g * sigmoid_scalar(-v))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(a) => {
                let (m, n) = y.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &dy.data()[i * n..(i + 1) * n];
                    let inner: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = y.dims2();
                let g = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &dy.data()[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = dy.data()[i * n + j];
                            dg[j] += gv * xhat[i * n + j];
                            db[j] += gv;
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, dg).unwrap());
                    self.accumulate(grads, *bias, Tensor::new(bs, db).unwrap());
                }
            }
            Op::L2Normalize(x, norms) => {
                let (m, n) = y.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &dy.data()[i * n..(i + 1) * n];
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * inner) / norms[i];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x);
                let w = y.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w]
                        .copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::ConcatCols(xs) => {
                let (m, total) = y.dims2();
                let mut offset = 0;
                for &x in xs {
                    let w = self.dims(x).1;
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(
                                &dy.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        let shape = self.value(x).shape().to_vec();
                        self.accumulate(grads, x, Tensor::new(shape, d).unwrap());
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, index) => {
                let (m, n) = self.dims(*x);
                let mut d = vec![0.0; m * n];
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += dy.data()[r * n + j];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::Sum(x) => {
                let g = dy.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, g));
            }
        }
    }
}

fn softmax_rows(x: &Tensor, mask: Option<&Vec<bool>>) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if allowed(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

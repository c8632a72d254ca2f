//! Reverse-mode differentiation over an append-only tape.
//!
//! Nodes are pushed in execution order, so walking the tape backwards
//! visits every node after all of its consumers. Gradients accumulate
//! additively into each input. Nodes that cannot reach a trainable leaf
//! are never differentiated.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::kernels::{dot, gelu_grad, layer_norm_with_stats};
use super::rng::{self, Rng};
use super::{gelu, matmul, matmul_nt, softmax_rows, ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    MaskMul(Var, Vec<T>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    L2NormalizeRows(Var, Vec<T>),
    MaxSim(Var, Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape: executed operations plus the values they produced.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    param_names: BTreeMap<Var, String>,
    dropout_rng: Option<Rng>,
    check_finite: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    by_var: Vec<Option<Tensor<T>>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter leaf; `None` if it was not reachable.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Gradients for every trainable parameter in `store`, zero where unreachable.
    pub fn named(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = self
                    .by_name
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            param_names: BTreeMap::new(),
            dropout_rng: None,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Training tape: dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        let mut g = Self::new();
        g.dropout_rng = Some(rng::stream(seed, "dropout"));
        g
    }

    /// Enables the finite-value check after every operation.
    pub fn verify(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
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

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (never differentiated).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by [`Grads::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once per tape) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let v = self.leaf(p.tensor.clone(), p.trainable);
        self.params.insert(name.to_string(), v);
        self.param_names.insert(v, name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(y, Op::MatMulNt(a, b), rg, "matmul_nt")
    }

    /// `x · wᵀ + bias` for a weight stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.rows() != sb.rows() || sa.cols() != sb.cols() {
            return Err(Error::Shape {
                op,
                left: sa.shape().to_vec(),
                right: sb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul(a, b), rg, "mul")
    }

    /// Adds `row` (length = columns of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let c = tx.cols();
        if tr.len() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, &b) in chunk.iter_mut().zip(tr.data()) {
                *v = *v + b;
            }
        }
        let y = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, row]);
        self.push(y, Op::AddRow(x, row), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, c), rg, "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(y, Op::Gelu(x), rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(stable_sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(y, Op::Abs(x), rg, "abs")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (y, stats) = layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: stats.normalized,
                inv_std: stats.inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Inverted dropout; the identity on inference tapes or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let y = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::MaskMul(x, mask), rg, "dropout")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > tx.rows() {
            return Err(Error::Contract(alloc::format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                tx.rows()
            )));
        }
        let y = Tensor::new(&[len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        self.push(y, Op::SliceRows(x, start), rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if len == 0 || start + len > c {
            return Err(Error::Contract(alloc::format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let y = Tensor::new(&[r, len], data)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::SliceCols(x, start), rg, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let y = Tensor::new(&[rows, c], data)?;
        let rg = self.rg(parts);
        self.push(y, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let y = Tensor::new(&[r, cols], data)?;
        let rg = self.rg(parts);
        self.push(y, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    /// Rows of `x` at `idx`, in order (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Contract(alloc::format!("row index {i} out of {r}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let y = Tensor::new(&[idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::GatherRows(x, idx.to_vec()), rg, "gather_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let tiny = T::from_f64(1e-12);
        let mut norms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let n = dot(row, row).sqrt().max(tiny);
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let y = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x]);
        self.push(y, Op::L2NormalizeRows(x, norms), rg, "l2_normalize_rows")
    }

    /// Late-interaction score `Σ_i max_j q_i · d_j`.
    pub fn maxsim(&mut self, q: Var, d: Var) -> Result<Var> {
        let (tq, td) = (self.value(q), self.value(d));
        if tq.cols() != td.cols() {
            return Err(Error::Shape {
                op: "maxsim",
                left: tq.shape().to_vec(),
                right: td.shape().to_vec(),
            });
        }
        let mut argmax = Vec::with_capacity(tq.rows());
        let mut total = T::zero();
        for i in 0..tq.rows() {
            let (mut best, mut arg) = (T::neg_infinity(), 0);
            for j in 0..td.rows() {
                let s = dot(tq.row(i), td.row(j));
                if s > best {
                    best = s;
                    arg = j;
                }
            }
            argmax.push(arg);
            total = total + best;
        }
        let rg = self.rg(&[q, d]);
        self.push(Tensor::scalar(total), Op::MaxSim(q, d, argmax), rg, "maxsim")
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rows() != targets.len() || targets.iter().any(|&t| t >= tl.cols()) {
            return Err(Error::Contract("cross_entropy targets do not match logits".into()));
        }
        let probs = softmax_rows(tl);
        let n = T::from_f64(targets.len() as f64);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs.get2(i, t).max(T::min_positive_value()).ln())
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, targets.to_vec(), probs.into_data()),
            rg,
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let by_name = self
            .param_names
            .iter()
            .filter_map(|(v, name)| grads[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Ok(Grads {
            by_var: grads,
            by_name,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(delta.reshape(shape).expect("gradient size matches value"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // y = a·b
                if self.wants(*a) {
                    let d = matmul_nt(g, self.value(*b)).expect("shapes checked forward");
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = matmul_tn(self.value(*a), g);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ
                if self.wants(*a) {
                    let d = matmul(g, &as_matrix(self.value(*b))).expect("shapes checked forward");
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = matmul_tn(g, self.value(*a));
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = zip_with(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = zip_with(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let c = g.cols();
                    let mut s = vec![T::zero(); c];
                    for chunk in g.data().chunks(c) {
                        for (a, &b) in s.iter_mut().zip(chunk) {
                            *a = *a + b;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::new(&[c], s).expect("len"));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * *c)),
            Op::Gelu(x) => {
                let d = zip_with(g, self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = zip_with(g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_with(g, y, |gv, yv| gv * yv * (T::one() - yv));
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = zip_with(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let s = dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), d).expect("len"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = y.cols();
                let gain_v = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (gr, xr) in g.data().chunks(c).zip(normalized.chunks(c)) {
                        for j in 0..c {
                            dg[j] = dg[j] + gr[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(&[c], dg).expect("len"));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); c];
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            db[j] = db[j] + gr[j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db).expect("len"));
                }
                if self.wants(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = Vec::with_capacity(y.len());
                    for ((gr, xr), &r) in g.data().chunks(c).zip(normalized.chunks(c)).zip(inv_std) {
                        let dxh: Vec<T> = gr.iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                        let s1 = dxh.iter().copied().sum::<T>();
                        let s2 = dot(&dxh, xr);
                        dx.extend((0..c).map(|j| r / n * (n * dxh[j] - s1 - xr[j] * s2)));
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape(), dx).expect("len"));
                }
            }
            Op::MaskMul(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data).expect("len"));
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let c = src.cols();
                    let mut d = vec![T::zero(); src.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, Tensor::new(src.shape(), d).expect("len"));
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let (c, w) = (src.cols(), g.cols());
                    let mut d = vec![T::zero(); src.len()];
                    for r in 0..g.rows() {
                        d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, Tensor::new(src.shape(), d).expect("len"));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let d = Tensor::new(&[n], g.data()[offset..offset + n].to_vec()).expect("len");
                        self.accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[d.len()], d).expect("len"));
                    }
                    start += w;
                }
            }
            Op::GatherRows(x, idx) => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let c = src.cols();
                    let mut d = vec![T::zero(); src.len()];
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[row * c + j] = d[row * c + j] + g.data()[k * c + j];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(src.shape(), d).expect("len"));
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
            Op::L2NormalizeRows(x, norms) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let s = dot(yr, gr);
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * s) / n));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), d).expect("len"));
            }
            Op::MaxSim(q, dm, argmax) => {
                let gv = g.data()[0];
                let (tq, td) = (self.value(*q), self.value(*dm));
                let c = tq.cols();
                if self.wants(*q) {
                    let mut dq = vec![T::zero(); tq.len()];
                    for (i, &j) in argmax.iter().enumerate() {
                        for k in 0..c {
                            dq[i * c + k] = gv * td.get2(j, k);
                        }
                    }
                    self.accumulate(grads, *q, Tensor::new(tq.shape(), dq).expect("len"));
                }
                if self.wants(*dm) {
                    let mut dd = vec![T::zero(); td.len()];
                    for (i, &j) in argmax.iter().enumerate() {
                        for k in 0..c {
                            dd[j * c + k] = dd[j * c + k] + gv * tq.get2(i, k);
                        }
                    }
                    self.accumulate(grads, *dm, Tensor::new(td.shape(), dd).expect("len"));
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let gv = g.data()[0];
                let tl = self.value(*logits);
                let c = tl.cols();
                let n = T::from_f64(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| gv * p / n).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - gv / n;
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape(), d).expect("len"));
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same length")
}

fn as_matrix<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    if t.shape().len() == 2 {
        t.clone()
    } else {
        t.clone().reshape(&[t.rows(), t.cols()]).expect("same size")
    }
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`.
fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(m, b.rows());
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &x) in arow.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    Tensor::new(&[k, n], out).expect("len")
}

//! Eager reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`ParamGraph`] owns every named parameter of a model together with its
//! gradient buffer, plus a tape of operation records. Each builder method
//! evaluates its op immediately, caches the result on the tape and returns a
//! [`Var`] handle. [`ParamGraph::backward`] walks the tape in reverse and
//! accumulates gradients into the parameters that feed the loss.
//!
//! Parameter leaves read their value from the store rather than copying it,
//! so the tape must be [`reset`](ParamGraph::reset_tape) before parameters
//! are updated and the next pass is recorded.

use std::collections::HashMap;
use std::fmt;

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Slope used by [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    LeakyRelu,
    Tanh,
    Identity,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "leaky_relu" => Ok(Self::LeakyRelu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A user-defined differentiable operation.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient per input (`None` when the input receives none).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    FrozenParam(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Standardize(Var, f64),
    LogSoftmax(Var),
    BceWithLogits(Var, Tensor),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Parameters whose leaf was recorded on the tape but had no path to the loss.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct BackwardReport {
    pub disconnected: Vec<String>,
}

#[derive(Debug, Default)]
pub struct ParamGraph {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    nodes: Vec<Node>,
}

impl ParamGraph {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- parameter store -------------------------------------------------

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        value.ensure_finite(&name)?;
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn set_param_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return shape_err(
                "set_param_value",
                format!("'{}' is {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            );
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn param_value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &mut p.grad)
    }

    pub fn zero_grads(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.params[id.0].grad.data_mut().fill(0.0);
        }
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    // ---- tape ------------------------------------------------------------

    /// Drops every recorded node. Parameters and gradients are kept.
    pub fn reset_tape(&mut self) {
        self.nodes.clear();
    }

    pub fn tape_len(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id) | Op::FrozenParam(id), _) => &self.params[id.0].value,
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-leaf node without a cached value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input. Non-finite values are rejected.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("graph input")?;
        Ok(self.push(Op::Input, t, false))
    }

    /// Records a constant that is allowed to be arbitrary (used for targets
    /// already validated elsewhere).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t, false)
    }

    /// A trainable leaf: gradients flow into the parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf reading the parameter's value but blocking its gradient.
    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::FrozenParam(id),
            value: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(Op::Input, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    /// `a + bias` with `bias` of shape `(1, cols)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(bias));
        at.ensure_matrix("add_bias")?;
        if bt.shape() != [1, at.cols()] {
            return shape_err("add_bias", format!("{:?} + {:?}", at.shape(), bt.shape()));
        }
        let c = at.cols();
        let mut out = at.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bt.data()[i % c];
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), out, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(at.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, k), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(Op::Act(a, act), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(Op::Exp(a), out, rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        self.push(Op::Clamp(a, lo, hi), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return shape_err("mean", "empty tensor");
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Mean(a), out, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols(a, start), out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        t.ensure_matrix("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return shape_err("gather_rows", format!("row {bad} out of {}", t.rows()));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out, rg))
    }

    /// Column-wise batch standardization `(x - mean) / max(std, eps)` with the
    /// population standard deviation.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        t.ensure_matrix("standardize")?;
        if t.rows() < 2 {
            return shape_err("standardize", "needs at least two rows");
        }
        let (out, _) = standardize_forward(t, eps);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Standardize(a, eps), out, rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        t.ensure_matrix("log_softmax")?;
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax(a), out, rg))
    }

    /// Elementwise binary cross-entropy of `logits` against constant `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return shape_err("bce_with_logits", format!("{:?} vs {:?}", t.shape(), targets.shape()));
        }
        let data = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::BceWithLogits(logits, targets), out, rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&tensors)?;
        let rg = self.rg(inputs);
        Ok(self.push(Op::Custom(op, inputs.to_vec()), out, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates d`loss`/d`param` into every trainable parameter on a path
    /// to `loss`. Parameters recorded on the tape without such a path get a
    /// zero gradient and are listed in the report.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        lt.ensure_finite("loss")?;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut reached = vec![false; self.params.len()];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input | Op::FrozenParam(_) => {}
                Op::Param(id) => {
                    let id = *id;
                    let p = &mut self.params[id.0];
                    for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                    reached[id.0] = true;
                }
                op => {
                    let contributions = self.op_backward(op, Var(i), &g)?;
                    for (v, dg) in contributions {
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        accumulate(&mut grads[v.0], dg);
                    }
                }
            }
        }

        let mut report = BackwardReport::default();
        let mut on_tape = vec![false; self.params.len()];
        for node in &self.nodes[..n] {
            if let Op::Param(id) = node.op {
                on_tape[id.0] = true;
            }
        }
        for (idx, (&used, &hit)) in on_tape.iter().zip(&reached).enumerate() {
            if used && !hit {
                let p = &mut self.params[idx];
                p.grad.data_mut().fill(0.0);
                report.disconnected.push(p.name.clone());
            }
        }
        Ok(report)
    }

    fn op_backward(&self, op: &Op, out: Var, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Input | Op::Param(_) | Op::FrozenParam(_) => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bt.data(), true, &mut da, 0.0);
                    res.push((*a, Tensor::matrix(m, k, da)?));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, g.data(), false, &mut db, 0.0);
                    res.push((*b, Tensor::matrix(k, n, db)?));
                }
            }
            Op::AddBias(a, b) => {
                res.push((*a, g.clone()));
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push((*b, Tensor::matrix(1, c, db)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    res.push((*a, zip(g, bt, |x, y| x * y)));
                }
                if self.requires_grad(*b) {
                    res.push((*b, zip(g, at, |x, y| x * y)));
                }
            }
            Op::Scale(a, k) => res.push((*a, g.map(|v| v * k))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Act(a, act) => {
                let (x, y) = (self.value(*a), self.value(out));
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), data)?));
            }
            Op::Exp(a) => res.push((*a, zip(g, self.value(out), |x, y| x * y))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                res.push((*a, zip(g, self.value(*a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                res.push((*a, Tensor::filled(&shape, g.item())));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                res.push((*a, Tensor::filled(t.shape(), g.item() / t.len() as f64)));
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (r, c, len) = (t.rows(), t.cols(), g.cols());
                let mut da = Tensor::zeros(t.shape());
                for i in 0..r {
                    da.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                res.push((*a, da));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for v in parts {
                    let len = self.value(*v).cols();
                    if self.requires_grad(*v) {
                        res.push((*v, g.slice_cols(start, len)?));
                    }
                    start += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut da = Tensor::zeros(t.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (acc, v) in da.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *acc += v;
                    }
                }
                res.push((*a, da));
            }
            Op::Standardize(a, eps) => {
                let eps = *eps;
                // y = (x - m) / max(sd, eps):
                // dx = (g - mean(g)) / sd - (x - m) * mean(g * (x - m)) / sd³ above the floor
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let rf = r as f64;
                let mean = x.col_means();
                let mut sd = vec![0.0; c];
                let mut mg = vec![0.0; c];
                let mut mgx = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        let d = x.data()[k] - mean[j];
                        sd[j] += d * d;
                        mg[j] += g.data()[k];
                        mgx[j] += g.data()[k] * d;
                    }
                }
                sd.iter_mut().for_each(|v| *v = (*v / rf).sqrt());
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let inv = 1.0 / sd[j].max(eps);
                    let coupling = if sd[j] > eps { mgx[j] / rf * inv * inv * inv } else { 0.0 };
                    for i in 0..r {
                        let k = i * c + j;
                        let d = x.data()[k] - mean[j];
                        dx[k] = inv * (g.data()[k] - mg[j] / rf) - d * coupling;
                    }
                }
                res.push((*a, Tensor::matrix(r, c, dx)?));
            }
            Op::LogSoftmax(a) => {
                let y = self.value(out);
                let c = y.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let gs: f64 = drow.iter().sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d -= yv.exp() * gs;
                    }
                }
                res.push((*a, dx));
            }
            Op::BceWithLogits(a, targets) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(targets.data()))
                    .map(|(&gv, (&xv, &t))| gv * (sigmoid(xv) - t))
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&tensors, self.value(out), g)?;
                if gs.len() != inputs.len() {
                    return shape_err("custom backward", format!("{} returned {} grads for {} inputs", op.name(), gs.len(), inputs.len()));
                }
                for (v, dg) in inputs.iter().zip(gs) {
                    if let Some(dg) = dg {
                        if dg.shape() != self.value(*v).shape() {
                            return shape_err("custom backward", format!("{} grad shape {:?}", op.name(), dg.shape()));
                        }
                        res.push((*v, dg));
                    }
                }
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Returns the standardized matrix and the per-column `1 / max(std, eps)`.
pub(crate) fn standardize_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = (x.rows(), x.cols());
    let mean = x.col_means();
    let mut var = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let d = x.data()[i * c + j] - mean[j];
            var[j] += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / r as f64).sqrt().max(eps)).collect();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % c;
        *v = (*v - mean[j]) * inv_std[j];
    }
    (out, inv_std)
}

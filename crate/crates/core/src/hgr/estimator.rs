use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{Activation, AdamConfig, AdamState, Mlp, ParamGraph, ParamId, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest batch accepted by [`HgrEstimator::estimate_step`].
pub const MIN_BATCH: usize = 8;

/// Output variance below which a transform is treated as constant.
const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HgrConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub ascent_steps: usize,
    pub lr: f64,
    pub eps: f64,
}

impl Default for HgrConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::LeakyRelu,
            ascent_steps: 10,
            lr: 5e-4,
            eps: 1e-8,
        }
    }
}

/// Neural maximal-correlation estimator: two transform networks `f(U)` and
/// `g(V)` with scalar outputs, trained by gradient ascent on the batch mean
/// of their standardized product.
#[derive(Clone, Debug)]
pub struct HgrEstimator {
    f_net: Mlp,
    g_net: Mlp,
    opt: AdamState,
    config: HgrConfig,
}

impl HgrEstimator {
    pub fn new<R: Rng + ?Sized>(
        graph: &mut ParamGraph,
        name: &str,
        dim_u: usize,
        dim_v: usize,
        config: HgrConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.ascent_steps == 0 {
            return Err(Error::InvalidArgument("ascent_steps must be positive".into()));
        }
        let widths = |d: usize| {
            let mut w = vec![d];
            w.extend(&config.hidden);
            w.push(1);
            w
        };
        let f_net = Mlp::new(graph, &format!("{name}.f"), &widths(dim_u), config.activation, rng)?;
        let g_net = Mlp::new(graph, &format!("{name}.g"), &widths(dim_v), config.activation, rng)?;
        let mut params = f_net.param_ids();
        params.extend(g_net.param_ids());
        let opt = AdamState::new(graph, params, AdamConfig::with_lr(config.lr));
        Ok(Self {
            f_net,
            g_net,
            opt,
            config,
        })
    }

    pub fn config(&self) -> &HgrConfig {
        &self.config
    }

    pub fn param_ids(&self) -> &[ParamId] {
        self.opt.params()
    }

    pub fn f_net(&self) -> &Mlp {
        &self.f_net
    }

    pub fn g_net(&self) -> &Mlp {
        &self.g_net
    }

    /// Adversary updates performed so far.
    pub fn steps_taken(&self) -> u64 {
        self.opt.step_count()
    }

    fn check_batch(u: &Tensor, v: &Tensor) -> Result<()> {
        if u.rows() != v.rows() {
            return Err(Error::InvalidArgument(format!(
                "batch row counts differ: {} vs {}",
                u.rows(),
                v.rows()
            )));
        }
        if u.rows() < MIN_BATCH {
            return Err(Error::InvalidArgument(format!(
                "batch of {} rows is below the minimum of {MIN_BATCH}",
                u.rows()
            )));
        }
        Ok(())
    }

    /// Runs `ascent_steps` gradient-ascent updates of both transforms on the
    /// batch and returns the post-update objective clamped to `[0, 1]`.
    /// A constant transform output yields 0 without updating.
    pub fn estimate_step(&mut self, graph: &mut ParamGraph, u: &Tensor, v: &Tensor) -> Result<f64> {
        Self::check_batch(u, v)?;
        for _ in 0..self.config.ascent_steps {
            graph.reset_tape();
            let (uv, vv) = (graph.input(u.clone())?, graph.input(v.clone())?);
            let fo = self.f_net.forward(graph, uv)?;
            let go = self.g_net.forward(graph, vv)?;
            if is_degenerate(graph.value(fo)) || is_degenerate(graph.value(go)) {
                warn!("hgr estimator: constant transform output on this batch, reporting 0");
                graph.reset_tape();
                return Ok(0.0);
            }
            let obj = self.standardized_product(graph, fo, go)?;
            let loss = graph.scale(obj, -1.0);
            graph.backward(loss)?;
            graph.reset_tape();
            self.opt.step(graph)?;
        }
        self.evaluate(graph, u, v)
    }

    /// Trains on `outer` random minibatches of `batch` rows drawn without
    /// replacement from the full sample, then returns the clamped objective
    /// over the full sample.
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        graph: &mut ParamGraph,
        u: &Tensor,
        v: &Tensor,
        batch: usize,
        outer: usize,
        rng: &mut R,
    ) -> Result<f64> {
        Self::check_batch(u, v)?;
        let n = u.rows();
        let batch = batch.clamp(MIN_BATCH, n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        for _ in 0..outer {
            if cursor + batch > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            self.estimate_step(graph, &u.select_rows(idx), &v.select_rows(idx))?;
        }
        self.evaluate(graph, u, v)
    }

    /// Tape-free objective on a batch, clamped to `[0, 1]`.
    pub fn evaluate(&self, graph: &ParamGraph, u: &Tensor, v: &Tensor) -> Result<f64> {
        Ok(self.raw_objective(graph, u, v)?.clamp(0.0, 1.0))
    }

    /// Tape-free unclamped objective `mean(f̂(u) ĝ(v))`, or 0 when either
    /// transform is constant on the batch.
    pub fn raw_objective(&self, graph: &ParamGraph, u: &Tensor, v: &Tensor) -> Result<f64> {
        Self::check_batch(u, v)?;
        let fo = self.f_net.eval(graph, u)?;
        let go = self.g_net.eval(graph, v)?;
        if is_degenerate(&fo) || is_degenerate(&go) {
            warn!("hgr estimator: constant transform output on this batch, reporting 0");
            return Ok(0.0);
        }
        let fs = standardize_column(fo.data(), self.config.eps);
        let gs = standardize_column(go.data(), self.config.eps);
        let n = fs.len() as f64;
        let value = fs.iter().zip(&gs).map(|(a, b)| a * b).sum::<f64>() / n;
        if !value.is_finite() {
            return Err(Error::NonFinite("hgr objective".into()));
        }
        Ok(value)
    }

    /// Standardized transform outputs of a batch, as used by the objective.
    pub fn standardized_outputs(&self, graph: &ParamGraph, u: &Tensor, v: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        Self::check_batch(u, v)?;
        let fo = self.f_net.eval(graph, u)?;
        let go = self.g_net.eval(graph, v)?;
        Ok((
            standardize_column(fo.data(), self.config.eps),
            standardize_column(go.data(), self.config.eps),
        ))
    }

    /// Records `|E[f̂ ĝ]|` on the tape with the adversary frozen, so that
    /// gradients reach whatever produced `u` and `v` but not the transforms.
    /// The magnitude is used because `(-f, g)` is as valid a witness as
    /// `(f, g)`: pushing the signed product below zero only flips the
    /// dependence the adversary found.
    pub fn penalty(&self, graph: &mut ParamGraph, u: Var, v: Var) -> Result<Var> {
        let fo = self.f_net.forward_frozen(graph, u)?;
        let go = self.g_net.forward_frozen(graph, v)?;
        let p = self.standardized_product(graph, fo, go)?;
        Ok(if graph.value(p).item() < 0.0 { graph.scale(p, -1.0) } else { p })
    }

    fn standardized_product(&self, graph: &mut ParamGraph, fo: Var, go: Var) -> Result<Var> {
        let fs = graph.standardize(fo, self.config.eps)?;
        let gs = graph.standardize(go, self.config.eps)?;
        let prod = graph.mul(fs, gs)?;
        graph.mean(prod)
    }
}

/// Settings for measuring dependence with a freshly trained estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct FitProtocol {
    pub batch: usize,
    pub outer_steps: usize,
    pub config: HgrConfig,
}

impl Default for FitProtocol {
    fn default() -> Self {
        Self {
            batch: 512,
            outer_steps: 200,
            config: HgrConfig::default(),
        }
    }
}

/// Trains a new estimator on `(u_fit, v_fit)` and reports its clamped
/// objective on `(u_eval, v_eval)`.
pub fn held_out_hgr<R: Rng + ?Sized>(
    u_fit: &Tensor,
    v_fit: &Tensor,
    u_eval: &Tensor,
    v_eval: &Tensor,
    protocol: &FitProtocol,
    rng: &mut R,
) -> Result<f64> {
    let mut graph = ParamGraph::new();
    let mut est = HgrEstimator::new(&mut graph, "probe", u_fit.cols(), v_fit.cols(), protocol.config.clone(), rng)?;
    est.fit(&mut graph, u_fit, v_fit, protocol.batch, protocol.outer_steps, rng)?;
    est.evaluate(&graph, u_eval, v_eval)
}

fn is_degenerate(t: &Tensor) -> bool {
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var < DEGENERATE_VAR
}

fn standardize_column(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(eps);
    x.iter().map(|v| (v - mean) * inv).collect()
}

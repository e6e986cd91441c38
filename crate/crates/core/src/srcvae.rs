//! Causal variational autoencoder inferring a latent proxy `z` of the
//! hidden sensitive attribute.
//!
//! The encoder reads `(x_c, x_d, y)` and outputs a diagonal Gaussian
//! posterior. Two decoders reconstruct `x_d` from `(x_c, z)` and `y` from
//! `(x_c, x_d, z)`. Training is a min-max game: an HGR adversary between
//! `x_c` and `z` is updated first, then the autoencoder takes one step on
//! reconstruction plus `λ_mmd · MMD²(z, prior) + λ_inf · HGR(x_c, z)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{ColumnKind, TabularDataset};
use crate::diffcore::{
    checkpoint, load_checkpoint, save_checkpoint, Activation, AdamConfig, AdamState, Mlp, ParamGraph, ParamId,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::fair_predictor::ProxyBank;
use crate::hgr::{held_out_hgr, FitProtocol, HgrConfig, HgrEstimator, MIN_BATCH};
use crate::mmd::{mmd2_var, MmdConfig};
use crate::rng::{normal_matrix, stream};

const EXPORT_BLOCK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub lambda_mmd: f64,
    pub lambda_inf: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub adversary: HgrConfig,
    pub mmd: MmdConfig,
    /// Epoch interval of the held-out `HGR(x_c, z)` measurement in the
    /// history; the last epoch is always measured. 0 measures only the last.
    pub hgr_every: usize,
    pub probe: FitProtocol,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            d_z: 5,
            hidden: vec![128, 128],
            lambda_mmd: 1.0,
            lambda_inf: 0.2,
            epochs: 100,
            batch_size: 512,
            lr: 1e-3,
            logvar_min: -10.0,
            logvar_max: 3.0,
            adversary: HgrConfig::default(),
            mmd: MmdConfig::default(),
            hgr_every: 25,
            probe: FitProtocol::default(),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_mmd >= 0.0 && self.lambda_inf >= 0.0) {
            return bad(format!("lambdas must be non-negative (mmd {}, inf {})", self.lambda_mmd, self.lambda_inf));
        }
        if self.d_z == 0 {
            return bad("d_z must be at least 1".into());
        }
        if self.batch_size < MIN_BATCH {
            return bad(format!("batch size must be at least {MIN_BATCH}"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} is not positive", self.lr));
        }
        if !(self.logvar_min <= self.logvar_max) {
            return bad("logvar_min exceeds logvar_max".into());
        }
        self.mmd.validate()
    }
}

/// Network sizes and the `x_d` layout; everything needed to rebuild a model
/// before loading its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrcvaeArch {
    pub dim_xc: usize,
    pub dim_xd: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// `(offset, width, kind)` of each source column inside `x_d`.
    pub xd_blocks: Vec<(usize, usize, ColumnKind)>,
}

impl SrcvaeArch {
    pub fn for_dataset(ds: &TabularDataset, cfg: &InferenceConfig) -> Self {
        Self {
            dim_xc: ds.encoder().dim_xc,
            dim_xd: ds.encoder().dim_xd,
            d_z: cfg.d_z,
            hidden: cfg.hidden.clone(),
            adversary_hidden: cfg.adversary.hidden.clone(),
            logvar_min: cfg.logvar_min,
            logvar_max: cfg.logvar_max,
            xd_blocks: ds.encoder().xd_blocks(),
        }
    }
}

/// Per-row mean over a batch of each reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReconParts {
    pub xd_continuous: f64,
    pub xd_categorical: f64,
    pub y: f64,
}

impl ReconParts {
    pub fn total(&self) -> f64 {
        self.xd_continuous + self.xd_categorical + self.y
    }
}

pub struct SrcvaeModel {
    graph: ParamGraph,
    arch: SrcvaeArch,
    encoder: Mlp,
    dec_xd: Mlp,
    dec_y: Mlp,
    adversary: HgrEstimator,
}

impl SrcvaeModel {
    pub fn new<R: Rng + ?Sized>(arch: SrcvaeArch, adversary: HgrConfig, rng: &mut R) -> Result<Self> {
        if arch.d_z == 0 {
            return Err(Error::InvalidArgument("d_z must be at least 1".into()));
        }
        let covered: usize = arch.xd_blocks.iter().map(|b| b.1).sum();
        if covered != arch.dim_xd {
            return Err(Error::Schema(format!("x_d blocks cover {covered} of {} columns", arch.dim_xd)));
        }
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend(&arch.hidden);
            w.push(output);
            w
        };
        let mut graph = ParamGraph::new();
        let act = Activation::LeakyRelu;
        let encoder = Mlp::new(&mut graph, "encoder", &widths(arch.dim_xc + arch.dim_xd + 1, 2 * arch.d_z), act, rng)?;
        let dec_xd = Mlp::new(&mut graph, "dec_xd", &widths(arch.dim_xc + arch.d_z, arch.dim_xd), act, rng)?;
        let dec_y = Mlp::new(&mut graph, "dec_y", &widths(arch.dim_xc + arch.dim_xd + arch.d_z, 1), act, rng)?;
        let adv_cfg = HgrConfig {
            hidden: arch.adversary_hidden.clone(),
            ..adversary
        };
        let adversary = HgrEstimator::new(&mut graph, "adversary", arch.dim_xc, arch.d_z, adv_cfg, rng)?;
        Ok(Self {
            graph,
            arch,
            encoder,
            dec_xd,
            dec_y,
            adversary,
        })
    }

    pub fn arch(&self) -> &SrcvaeArch {
        &self.arch
    }

    pub fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn dec_xd(&self) -> &Mlp {
        &self.dec_xd
    }

    pub fn dec_y(&self) -> &Mlp {
        &self.dec_y
    }

    pub fn adversary(&self) -> &HgrEstimator {
        &self.adversary
    }

    /// Encoder and decoder parameters, excluding the adversary.
    pub fn vae_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.dec_xd.param_ids());
        ids.extend(self.dec_y.param_ids());
        ids
    }

    fn check_rows(&self, x_c: &Tensor, x_d: &Tensor, y: &Tensor) -> Result<()> {
        let n = x_c.rows();
        if x_d.rows() != n || y.rows() != n {
            return Err(Error::InvalidArgument(format!(
                "row counts differ: x_c {n}, x_d {}, y {}",
                x_d.rows(),
                y.rows()
            )));
        }
        if x_c.cols() != self.arch.dim_xc || x_d.cols() != self.arch.dim_xd || y.cols() != 1 {
            return Err(Error::Schema(format!(
                "expected widths ({}, {}, 1), got ({}, {}, {})",
                self.arch.dim_xc,
                self.arch.dim_xd,
                x_c.cols(),
                x_d.cols(),
                y.cols()
            )));
        }
        Ok(())
    }

    /// Posterior mean and standard deviation per row, without recording.
    pub fn posterior(&self, x_c: &Tensor, x_d: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_rows(x_c, x_d, y)?;
        let input = Tensor::concat_cols(&[x_c, x_d, y])?;
        let out = self.encoder.eval_blocks(&self.graph, &input, EXPORT_BLOCK)?;
        out.ensure_finite("encoder output")?;
        let d = self.arch.d_z;
        let mu = out.slice_cols(0, d)?;
        let (lo, hi) = (self.arch.logvar_min, self.arch.logvar_max);
        let sigma = out.slice_cols(d, d)?.map(|v| (0.5 * v.clamp(lo, hi)).exp());
        Ok((mu, sigma))
    }

    /// Records `z = μ + σ ⊙ eps` on the tape.
    fn sample_on_tape(&mut self, enc_in: Var, eps: &Tensor) -> Result<Var> {
        let d = self.arch.d_z;
        let g = &mut self.graph;
        let out = self.encoder.forward(g, enc_in)?;
        if !g.value(out).is_finite() {
            return Err(Error::Divergence("non-finite encoder output".into()));
        }
        let mu = g.slice_cols(out, 0, d)?;
        let lv = g.slice_cols(out, d, d)?;
        let lv = g.clamp(lv, self.arch.logvar_min, self.arch.logvar_max);
        let half = g.scale(lv, 0.5);
        let sigma = g.exp(half);
        let e = g.input(eps.clone())?;
        let noise = g.mul(sigma, e)?;
        g.add(mu, noise)
    }

    /// Negative log-likelihood terms on the tape, each summed over rows.
    fn recon_on_tape(&mut self, xc: Var, x_d: &Tensor, y: &Tensor, z: Var) -> Result<[Option<Var>; 3]> {
        let g = &mut self.graph;
        let dec_in = g.concat_cols(&[xc, z])?;
        let xd_hat = self.dec_xd.forward(g, dec_in)?;
        let xd = g.input(x_d.clone())?;

        let mut cont_mask = vec![0.0; self.arch.dim_xd];
        let mut categorical = Vec::new();
        for &(offset, width, kind) in &self.arch.xd_blocks {
            match kind {
                ColumnKind::Continuous => cont_mask[offset..offset + width].fill(1.0),
                ColumnKind::Categorical => categorical.push((offset, width)),
            }
        }
        let n = x_d.rows();
        let cont = if cont_mask.contains(&1.0) {
            let mask: Vec<f64> = cont_mask.iter().copied().cycle().take(n * cont_mask.len()).collect();
            let mask = g.constant(Tensor::matrix(n, cont_mask.len(), mask)?);
            let diff = g.sub(xd_hat, xd)?;
            let diff = g.mul(diff, mask)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            Some(g.scale(s, 0.5))
        } else {
            None
        };
        let mut cat: Option<Var> = None;
        for (offset, width) in categorical {
            let logits = g.slice_cols(xd_hat, offset, width)?;
            let logp = g.log_softmax(logits)?;
            let target = g.constant(x_d.slice_cols(offset, width)?);
            let picked = g.mul(logp, target)?;
            let s = g.sum(picked);
            let nll = g.scale(s, -1.0);
            cat = Some(match cat {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
        }
        let y_in = g.concat_cols(&[xc, xd, z])?;
        let logit = self.dec_y.forward(g, y_in)?;
        let bce = g.bce_with_logits(logit, y.clone())?;
        let y_term = g.sum(bce);
        Ok([cont, cat, Some(y_term)])
    }

    /// Reconstruction terms for a batch and given latent draws.
    pub fn reconstruction_loss(&mut self, x_c: &Tensor, x_d: &Tensor, y: &Tensor, z: &Tensor) -> Result<ReconParts> {
        self.check_rows(x_c, x_d, y)?;
        if z.rows() != x_c.rows() || z.cols() != self.arch.d_z {
            return Err(Error::InvalidArgument(format!("z has shape {:?}", z.shape())));
        }
        self.graph.reset_tape();
        let xc = self.graph.input(x_c.clone())?;
        let zv = self.graph.input(z.clone())?;
        let terms = self.recon_on_tape(xc, x_d, y, zv)?;
        let n = x_c.rows() as f64;
        let val = |v: Option<Var>| v.map_or(0.0, |v| self.graph.value(v).item() / n);
        let parts = ReconParts {
            xd_continuous: val(terms[0]),
            xd_categorical: val(terms[1]),
            y: val(terms[2]),
        };
        self.graph.reset_tape();
        Ok(parts)
    }

    /// One min-max step. Returns the adversary's batch estimate and the
    /// loss terms of the descent step.
    fn train_step(
        &mut self,
        opt: &mut AdamState,
        batch: (&Tensor, &Tensor, &Tensor),
        eps: &Tensor,
        prior: Option<&Tensor>,
        cfg: &InferenceConfig,
    ) -> Result<StepLog> {
        let (x_c, x_d, y) = batch;
        // Max phase on detached draws.
        let (mu, sigma) = self.posterior(x_c, x_d, y)?;
        let z = add_noise(&mu, &sigma, eps);
        let adversary = self.adversary.estimate_step(&mut self.graph, x_c, &z)?;

        // Min phase.
        self.graph.reset_tape();
        let enc_in = self.graph.input(Tensor::concat_cols(&[x_c, x_d, y])?)?;
        let xc = self.graph.input(x_c.clone())?;
        let zv = self.sample_on_tape(enc_in, eps)?;
        let terms = self.recon_on_tape(xc, x_d, y, zv)?;
        let n = x_c.rows() as f64;
        let g = &mut self.graph;
        let mut total: Option<Var> = None;
        for t in terms.into_iter().flatten() {
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
        let recon = g.scale(total.expect("label term always present"), 1.0 / n);
        let recon_value = g.value(recon).item();
        let mut loss = recon;
        let mut mmd_value = f64::NAN;
        if let (true, Some(prior)) = (cfg.lambda_mmd > 0.0, prior) {
            let m = mmd2_var(g, zv, prior, &cfg.mmd)?;
            mmd_value = g.value(m).item();
            let weighted = g.scale(m, cfg.lambda_mmd);
            loss = g.add(loss, weighted)?;
        }
        let mut penalty_value = f64::NAN;
        if cfg.lambda_inf > 0.0 {
            let p = self.adversary.penalty(&mut self.graph, xc, zv)?;
            penalty_value = self.graph.value(p).item();
            let weighted = self.graph.scale(p, cfg.lambda_inf);
            loss = self.graph.add(loss, weighted)?;
        }
        let loss_value = self.graph.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("inference loss is {loss_value}")));
        }
        self.graph.backward(loss)?;
        self.graph.reset_tape();
        opt.step(&mut self.graph)?;
        Ok(StepLog {
            loss: loss_value,
            recon: recon_value,
            mmd: mmd_value,
            penalty: penalty_value,
            adversary,
        })
    }

    fn snapshot(&self) -> Vec<Tensor> {
        self.graph.named_params().map(|(_, t)| t.clone()).collect()
    }

    fn restore(&mut self, snap: Vec<Tensor>) -> Result<()> {
        let ids: Vec<ParamId> = self.graph.param_ids().collect();
        for (id, t) in ids.into_iter().zip(snap) {
            self.graph.set_param_value(id, t)?;
        }
        Ok(())
    }

    /// Writes the weights to `path` and the architecture next to it as
    /// `<path stem>.arch.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.graph, path)?;
        fs::write(arch_path(path), serde_json::to_string_pretty(&self.arch)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch: SrcvaeArch = serde_json::from_str(&fs::read_to_string(arch_path(path))?)?;
        // Initial weights are overwritten; any generator will do.
        let mut model = Self::new(arch, HgrConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
        load_checkpoint(&mut model.graph, path)?;
        Ok(model)
    }
}

fn arch_path(path: &Path) -> PathBuf {
    path.with_extension("arch.json")
}

fn add_noise(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Tensor {
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data).expect("same shape")
}

/// One reparameterized draw `z = μ + σ ⊙ ε` per row.
pub fn encode_sample<R: Rng + ?Sized>(
    model: &SrcvaeModel,
    x_c: &Tensor,
    x_d: &Tensor,
    y: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let (mu, sigma) = model.posterior(x_c, x_d, y)?;
    let eps = normal_matrix(rng, mu.rows(), mu.cols());
    Ok(add_noise(&mu, &sigma, &eps))
}

struct StepLog {
    loss: f64,
    recon: f64,
    mmd: f64,
    penalty: f64,
    adversary: f64,
}

/// One row per epoch. Terms that were not computed are NaN; `hgr_xc_z` is
/// only measured on scheduled epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub mmd: f64,
    pub hgr_penalty: f64,
    pub hgr_adversary: f64,
    pub hgr_xc_z: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferenceHistory {
    pub epochs: Vec<InferenceEpoch>,
}

impl InferenceHistory {
    pub const HEADER: [&'static str; 7] = ["epoch", "loss", "recon", "mmd", "hgr_penalty", "hgr_adversary", "hgr_xc_z"];

    /// The most recent `hgr_xc_z` measurement.
    pub fn final_hgr(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.hgr_xc_z)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                fmt_f64(e.loss),
                fmt_f64(e.recon),
                fmt_f64(e.mmd),
                fmt_f64(e.hgr_penalty),
                fmt_f64(e.hgr_adversary),
                e.hgr_xc_z.map_or_else(String::new, fmt_f64),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Shortest round-trip formatting; NaN becomes an empty field.
pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub struct InferenceOutcome {
    /// The trained model, or the last completed epoch's weights when
    /// training diverged.
    pub model: SrcvaeModel,
    pub history: InferenceHistory,
    pub diverged: Option<String>,
}

/// Independent estimate of `HGR(x_c, z)`: a fresh estimator is trained on
/// one posterior draw per row of `fit_on` and evaluated on one draw per row
/// of `eval_on`.
pub fn latent_hgr(
    model: &SrcvaeModel,
    fit_on: &TabularDataset,
    eval_on: &TabularDataset,
    protocol: &FitProtocol,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, 7);
    let z_fit = encode_sample(model, fit_on.x_c(), fit_on.x_d(), &fit_on.y_column(), &mut rng)?;
    let z_eval = encode_sample(model, eval_on.x_c(), eval_on.x_d(), &eval_on.y_column(), &mut rng)?;
    held_out_hgr(fit_on.x_c(), &z_fit, eval_on.x_c(), &z_eval, protocol, &mut rng)
}

/// Trains the autoencoder on `train`. Scheduled leakage measurements are
/// fitted on `train` and evaluated on `heldout` (or on `train` if absent).
pub fn train_inference(
    train: &TabularDataset,
    heldout: Option<&TabularDataset>,
    cfg: &InferenceConfig,
) -> Result<InferenceOutcome> {
    cfg.validate()?;
    let n = train.len();
    if n < MIN_BATCH {
        return Err(Error::Data(format!("{n} training rows is below the minimum batch of {MIN_BATCH}")));
    }
    let mut init_rng = stream(cfg.seed, 0);
    let mut rng = stream(cfg.seed, 1);
    let mut model = SrcvaeModel::new(SrcvaeArch::for_dataset(train, cfg), cfg.adversary.clone(), &mut init_rng)?;
    let mut opt = AdamState::new(&model.graph, model.vae_param_ids(), AdamConfig::with_lr(cfg.lr));
    let (x_c, x_d, y) = (train.x_c(), train.x_d(), train.y_column());
    let eval_on = heldout.unwrap_or(train);
    info!(
        "inference: {n} rows, d_z = {}, lambda_mmd = {}, lambda_inf = {}, {} epochs",
        cfg.d_z, cfg.lambda_mmd, cfg.lambda_inf, cfg.epochs
    );

    let mut history = InferenceHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good = model.snapshot();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < MIN_BATCH {
                continue;
            }
            let batch = (&x_c.select_rows(idx), &x_d.select_rows(idx), &y.select_rows(idx));
            let eps = normal_matrix(&mut rng, idx.len(), cfg.d_z);
            let prior = (cfg.lambda_mmd > 0.0).then(|| {
                let m = if cfg.mmd.prior_sample_count == 0 { idx.len() } else { cfg.mmd.prior_sample_count };
                normal_matrix(&mut rng, m, cfg.d_z)
            });
            match model.train_step(&mut opt, batch, &eps, prior.as_ref(), cfg) {
                Ok(log) => {
                    for (s, v) in sums.iter_mut().zip([log.loss, log.recon, log.mmd, log.penalty, log.adversary]) {
                        *s += v;
                    }
                    steps += 1;
                }
                Err(Error::Divergence(msg) | Error::NonFinite(msg)) => {
                    warn!("inference diverged in epoch {epoch}: {msg}; restoring epoch {}", epoch - 1);
                    model.restore(last_good)?;
                    return Ok(InferenceOutcome {
                        model,
                        history,
                        diverged: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let mean = |k: usize| sums[k] / steps.max(1) as f64;
        let scheduled = epoch == cfg.epochs || (cfg.hgr_every > 0 && epoch % cfg.hgr_every == 0);
        let hgr_xc_z = if scheduled {
            Some(latent_hgr(&model, train, eval_on, &cfg.probe, cfg.seed ^ epoch as u64)?)
        } else {
            None
        };
        let row = InferenceEpoch {
            epoch,
            loss: mean(0),
            recon: mean(1),
            mmd: mean(2),
            hgr_penalty: mean(3),
            hgr_adversary: mean(4),
            hgr_xc_z,
        };
        debug!("inference epoch {epoch}: {row:?}");
        if let Some(h) = hgr_xc_z {
            info!("epoch {epoch}: loss {:.4}, recon {:.4}, HGR(x_c, z) {h:.3}", row.loss, row.recon);
        }
        history.epochs.push(row);
        last_good = model.snapshot();
    }
    Ok(InferenceOutcome {
        model,
        history,
        diverged: None,
    })
}

/// Posterior moments and `k` reparameterized draws for every row.
pub struct LatentExport {
    pub row_ids: Vec<u64>,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub bank: ProxyBank,
}

/// Draws `k` latent samples per row of `ds`. Rows are processed in blocks
/// in parallel; block `b` uses its own stream of `seed`, so the result does
/// not depend on the thread count.
pub fn export_latents(model: &SrcvaeModel, ds: &TabularDataset, k: usize, seed: u64) -> Result<LatentExport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let (mu, sigma) = model.posterior(ds.x_c(), ds.x_d(), &ds.y_column())?;
    let (n, d) = (mu.rows(), mu.cols());
    let blocks: Vec<usize> = (0..n.div_ceil(EXPORT_BLOCK)).collect();
    let parts: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&b| {
            let mut rng = stream(seed, b as u64);
            let rows = b * EXPORT_BLOCK..((b + 1) * EXPORT_BLOCK).min(n);
            let mut out = Vec::with_capacity(rows.len() * k * d);
            for r in rows {
                let (m, s) = (mu.row(r), sigma.row(r));
                for _ in 0..k {
                    for j in 0..d {
                        let e: f64 = rng.sample(StandardNormal);
                        out.push(m[j] + s[j] * e);
                    }
                }
            }
            out
        })
        .collect();
    let bank = ProxyBank::new(n, k, d, parts.concat())?;
    Ok(LatentExport {
        row_ids: ds.row_ids().to_vec(),
        mu,
        sigma,
        bank,
    })
}

impl LatentExport {
    /// Per-row `row_id, mu_0.., sigma_0..` as CSV.
    pub fn write_moments_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.mu.cols();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["row_id".to_string()];
        header.extend((0..d).map(|j| format!("mu_{j}")));
        header.extend((0..d).map(|j| format!("sigma_{j}")));
        out.write_record(&header)?;
        for (r, id) in self.row_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.mu.row(r).iter().map(|v| v.to_string()));
            rec.extend(self.sigma.row(r).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the bank to `bank_path` and the moments to `moments_path`.
    pub fn save(&self, bank_path: &Path, moments_path: &Path) -> Result<()> {
        self.bank.save(bank_path)?;
        self.write_moments_csv(std::io::BufWriter::new(fs::File::create(moments_path)?))
    }
}

/// Reads the `row_id` column of a moments CSV.
pub fn read_moment_row_ids(path: &Path) -> Result<Vec<u64>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| checkpoint::format_err(path, "bad row_id"))
        })
        .collect()
}

//! Fair classifier trained with log-loss plus adversarial HGR penalties
//! between its predictions and sampled sensitive proxies.
//!
//! Demographic parity uses one adversary on all rows; equalized odds uses
//! one adversary per label class, each seeing only the rows of its class.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{FeatureView, TabularDataset};
use crate::diffcore::checkpoint::format_err;
use crate::diffcore::{load_checkpoint, save_checkpoint, sigmoid, Activation, AdamConfig, AdamState, Mlp, ParamGraph, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::hgr::{held_out_hgr, FitProtocol, HgrConfig, HgrEstimator, MIN_BATCH};
use crate::metrics::{threshold, CellCounts, MetricsReport};
use crate::rng::stream;
use crate::srcvae::fmt_f64;

/// Magic bytes of a latent bank file.
pub const BANK_MAGIC: &[u8; 5] = b"FPLZ1";

const PREDICT_BLOCK: usize = 1024;

/// `k` latent draws of dimension `d_z` for each of `n_rows` rows.
///
/// File layout: `"FPLZ1"`, then `n_rows`, `k`, `d_z` as little-endian u64,
/// then the draws as little-endian f64 in row, draw, dimension order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank {
    n_rows: usize,
    k: usize,
    d_z: usize,
    data: Vec<f64>,
}

impl ProxyBank {
    pub fn new(n_rows: usize, k: usize, d_z: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d_z == 0 {
            return Err(Error::InvalidArgument(format!("bank needs k >= 1 and d_z >= 1, got {k} and {d_z}")));
        }
        if data.len() != n_rows * k * d_z {
            return Err(Error::InvalidArgument(format!(
                "bank payload has {} values, expected {n_rows} x {k} x {d_z}",
                data.len()
            )));
        }
        Ok(Self { n_rows, k, d_z, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Draw `j` of row `row`.
    pub fn sample(&self, row: usize, j: usize) -> &[f64] {
        let start = (row * self.k + j) * self.d_z;
        &self.data[start..start + self.d_z]
    }

    /// One uniformly chosen draw for each listed row.
    pub fn draw<R: Rng + ?Sized>(&self, rows: &[usize], rng: &mut R) -> Tensor {
        let mut out = Vec::with_capacity(rows.len() * self.d_z);
        for &r in rows {
            let j = rng.random_range(0..self.k);
            out.extend_from_slice(self.sample(r, j));
        }
        Tensor::matrix(rows.len(), self.d_z, out).expect("sized buffer")
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let stride = self.k * self.d_z;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &r in idx {
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        Self {
            n_rows: idx.len(),
            k: self.k,
            d_z: self.d_z,
            data,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        for v in [self.n_rows, self.k, self.d_z] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(fs::File::create(path)?))
    }

    pub fn read<R: Read>(mut r: R, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 29 || &bytes[..5] != BANK_MAGIC {
            return Err(format_err(path, "not a latent bank"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().expect("8 bytes")) as usize;
        let (n_rows, k, d_z) = (word(0), word(1), word(2));
        let expected = n_rows
            .checked_mul(k)
            .and_then(|v| v.checked_mul(d_z))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| format_err(path, "header overflows"))?;
        let payload = &bytes[29..];
        if payload.len() != expected {
            return Err(format_err(path, format!("payload is {} bytes, header implies {expected}", payload.len())));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(n_rows, k, d_z, data).map_err(|e| format_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?), path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Objective {
    Plain,
    /// Demographic parity with weight `lambda`.
    Dp { lambda: f64 },
    /// Equalized odds with weights for the `y = 0` and `y = 1` adversaries.
    Eo { lambda0: f64, lambda1: f64 },
}

impl Objective {
    fn adversaries(self) -> usize {
        match self {
            Objective::Plain => 0,
            Objective::Dp { .. } => 1,
            Objective::Eo { .. } => 2,
        }
    }

    fn validate(self) -> Result<()> {
        let ok = match self {
            Objective::Plain => true,
            Objective::Dp { lambda } => lambda >= 0.0,
            Objective::Eo { lambda0, lambda1 } => lambda0 >= 0.0 && lambda1 >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("fairness weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adversary: HgrConfig,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 512,
            lr: 1e-3,
            adversary: HgrConfig::default(),
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < MIN_BATCH {
            return Err(Error::Config(format!("batch size must be at least {MIN_BATCH}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorArch {
    pub dim_xc: usize,
    pub dim_xd: usize,
    pub hidden: Vec<usize>,
    pub adversary_hidden: Vec<usize>,
    pub d_z: usize,
    pub objective: Objective,
}

pub struct FairPredictor {
    graph: ParamGraph,
    arch: PredictorArch,
    h_net: Mlp,
    adversaries: Vec<HgrEstimator>,
}

impl FairPredictor {
    /// `h_rng` initializes the classifier, `adv_rng` the adversaries, so the
    /// classifier's initial weights do not depend on the objective.
    pub fn new<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        arch: PredictorArch,
        adversary: HgrConfig,
        h_rng: &mut R1,
        adv_rng: &mut R2,
    ) -> Result<Self> {
        let mut graph = ParamGraph::new();
        let mut widths = vec![arch.dim_xc + arch.dim_xd];
        widths.extend(&arch.hidden);
        widths.push(1);
        let h_net = Mlp::new(&mut graph, "h", &widths, Activation::LeakyRelu, h_rng)?;
        let cfg = HgrConfig {
            hidden: arch.adversary_hidden.clone(),
            ..adversary
        };
        let adversaries = (0..arch.objective.adversaries())
            .map(|i| HgrEstimator::new(&mut graph, &format!("adversary{i}"), 1, arch.d_z, cfg.clone(), adv_rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            graph,
            arch,
            h_net,
            adversaries,
        })
    }

    pub fn arch(&self) -> &PredictorArch {
        &self.arch
    }

    pub fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    pub fn h_net(&self) -> &Mlp {
        &self.h_net
    }

    pub fn h_param_ids(&self) -> Vec<ParamId> {
        self.h_net.param_ids()
    }

    fn input(&self, view: FeatureView<'_>) -> Result<Tensor> {
        if view.x_c.cols() != self.arch.dim_xc || view.x_d.cols() != self.arch.dim_xd {
            return Err(Error::Schema(format!(
                "predictor expects widths ({}, {}), got ({}, {})",
                self.arch.dim_xc,
                self.arch.dim_xd,
                view.x_c.cols(),
                view.x_d.cols()
            )));
        }
        view.concat()
    }

    pub fn logits(&self, view: FeatureView<'_>) -> Result<Vec<f64>> {
        let x = self.input(view)?;
        Ok(self.h_net.eval_blocks(&self.graph, &x, PREDICT_BLOCK)?.into_data())
    }

    /// `P(y = 1 | x_c, x_d)` per row.
    pub fn predict(&self, view: FeatureView<'_>) -> Result<Vec<f64>> {
        Ok(self.logits(view)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.graph, path)?;
        fs::write(arch_path(path), serde_json::to_string_pretty(&self.arch)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let arch: PredictorArch = serde_json::from_str(&fs::read_to_string(arch_path(path))?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(arch, HgrConfig::default(), &mut rng.clone(), &mut rng)?;
        load_checkpoint(&mut model.graph, path)?;
        Ok(model)
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

    /// One min-max step on a batch. Returns the loss and the mean adversary
    /// estimate (NaN when no adversary ran).
    fn train_step(
        &mut self,
        opt: &mut AdamState,
        x: &Tensor,
        y: &Tensor,
        z: Option<&Tensor>,
    ) -> Result<(f64, f64)> {
        let objective = self.arch.objective;
        // Row groups seen by each adversary.
        let groups: Vec<Vec<usize>> = match objective {
            Objective::Plain => Vec::new(),
            Objective::Dp { .. } => vec![(0..x.rows()).collect()],
            Objective::Eo { .. } => (0..2)
                .map(|c| (0..y.rows()).filter(|&i| y.data()[i] == c as f64).collect())
                .collect(),
        };
        let weights: Vec<f64> = match objective {
            Objective::Plain => Vec::new(),
            Objective::Dp { lambda } => vec![lambda],
            Objective::Eo { lambda0, lambda1 } => vec![lambda0, lambda1],
        };

        let mut estimates = Vec::new();
        if let Some(z) = z {
            let p = self.h_net.eval(&self.graph, x)?.map(sigmoid);
            for (c, rows) in groups.iter().enumerate() {
                if rows.len() < MIN_BATCH {
                    debug!("adversary {c}: {} rows in batch, skipped", rows.len());
                    continue;
                }
                let est = self.adversaries[c].estimate_step(&mut self.graph, &p.select_rows(rows), &z.select_rows(rows))?;
                estimates.push(est);
            }
        }

        let g = &mut self.graph;
        g.reset_tape();
        let xv = g.input(x.clone())?;
        let logit = self.h_net.forward(g, xv)?;
        let bce = g.bce_with_logits(logit, y.clone())?;
        let mut loss = g.mean(bce)?;
        if let Some(z) = z {
            let p = g.sigmoid(logit);
            for (c, rows) in groups.iter().enumerate() {
                if weights[c] == 0.0 || rows.len() < MIN_BATCH {
                    continue;
                }
                let pc: Var = if rows.len() == x.rows() { p } else { self.graph.gather_rows(p, rows)? };
                let zc = self.graph.input(z.select_rows(rows))?;
                let pen = self.adversaries[c].penalty(&mut self.graph, pc, zc)?;
                let weighted = self.graph.scale(pen, weights[c]);
                loss = self.graph.add(loss, weighted)?;
            }
        }
        let value = self.graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("predictor loss is {value}")));
        }
        self.graph.backward(loss)?;
        self.graph.reset_tape();
        opt.step(&mut self.graph)?;
        let adv = if estimates.is_empty() {
            f64::NAN
        } else {
            estimates.iter().sum::<f64>() / estimates.len() as f64
        };
        Ok((value, adv))
    }
}

fn arch_path(path: &Path) -> PathBuf {
    path.with_extension("arch.json")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub p_rule: f64,
    pub hgr_pred_z: f64,
    pub delta_fpr: f64,
    pub delta_fnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictorHistory {
    pub epochs: Vec<PredictorEpoch>,
}

impl PredictorHistory {
    pub const HEADER: [&'static str; 7] = ["epoch", "loss", "accuracy", "p_rule", "hgr_pred_z", "delta_fpr", "delta_fnr"];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                fmt_f64(e.loss),
                fmt_f64(e.accuracy),
                fmt_f64(e.p_rule),
                fmt_f64(e.hgr_pred_z),
                fmt_f64(e.delta_fpr),
                fmt_f64(e.delta_fnr),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub struct PredictorOutcome {
    /// The trained model, or the last completed epoch's weights when
    /// training diverged.
    pub model: FairPredictor,
    pub history: PredictorHistory,
    pub diverged: Option<String>,
}

/// Trains a classifier on `train`. `bank` must hold proxies for exactly the
/// rows of `train` unless the objective is plain. History metrics are
/// measured on `monitor` (or `train` if absent) against its held-out
/// sensitive attribute.
pub fn train_predictor(
    train: &TabularDataset,
    bank: Option<&ProxyBank>,
    objective: Objective,
    cfg: &PredictorConfig,
    monitor: Option<&TabularDataset>,
) -> Result<PredictorOutcome> {
    cfg.validate()?;
    objective.validate()?;
    let n = train.len();
    if n < MIN_BATCH {
        return Err(Error::Data(format!("{n} training rows is below the minimum batch of {MIN_BATCH}")));
    }
    let bank = match (objective, bank) {
        (Objective::Plain, _) => None,
        (_, None) => return Err(Error::InvalidArgument("a fairness objective needs a proxy bank".into())),
        (_, Some(b)) if b.n_rows() != n => {
            return Err(Error::Data(format!("bank has {} rows, training set has {n}", b.n_rows())));
        }
        (_, Some(b)) => Some(b),
    };
    let arch = PredictorArch {
        dim_xc: train.encoder().dim_xc,
        dim_xd: train.encoder().dim_xd,
        hidden: cfg.hidden.clone(),
        adversary_hidden: cfg.adversary.hidden.clone(),
        d_z: bank.map_or(1, ProxyBank::d_z),
        objective,
    };
    let mut model = FairPredictor::new(arch, cfg.adversary.clone(), &mut stream(cfg.seed, 0), &mut stream(cfg.seed, 2))?;
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut bank_rng = stream(cfg.seed, 3);
    let mut opt = AdamState::new(&model.graph, model.h_param_ids(), AdamConfig::with_lr(cfg.lr));
    let x = train.features().concat()?;
    let y = train.y_column();
    let monitor = monitor.unwrap_or(train);
    info!("predictor: {n} rows, objective {objective:?}, {} epochs", cfg.epochs);

    let mut history = PredictorHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_good = model.snapshot();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut adv_sum, mut steps, mut adv_steps) = (0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < MIN_BATCH {
                continue;
            }
            let z = bank.map(|b| b.draw(idx, &mut bank_rng));
            match model.train_step(&mut opt, &x.select_rows(idx), &y.select_rows(idx), z.as_ref()) {
                Ok((loss, adv)) => {
                    loss_sum += loss;
                    steps += 1;
                    if !adv.is_nan() {
                        adv_sum += adv;
                        adv_steps += 1;
                    }
                }
                Err(Error::Divergence(msg) | Error::NonFinite(msg)) => {
                    warn!("predictor diverged in epoch {epoch}: {msg}; restoring epoch {}", epoch - 1);
                    model.restore(last_good)?;
                    return Ok(PredictorOutcome {
                        model,
                        history,
                        diverged: Some(msg),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let probs = model.predict(monitor.features())?;
        let counts = CellCounts::tally(&threshold(&probs), monitor.y(), monitor.sensitive())?;
        let m = counts.mistreatment();
        let row = PredictorEpoch {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            accuracy: counts.accuracy().unwrap_or(f64::NAN),
            p_rule: counts.p_rule().unwrap_or(f64::NAN),
            hgr_pred_z: if adv_steps > 0 { adv_sum / adv_steps as f64 } else { f64::NAN },
            delta_fpr: m.delta_fpr.unwrap_or(f64::NAN),
            delta_fnr: m.delta_fnr.unwrap_or(f64::NAN),
        };
        debug!("predictor epoch {epoch}: {row:?}");
        history.epochs.push(row);
        last_good = model.snapshot();
    }
    if let Some(last) = history.epochs.last() {
        info!(
            "predictor done: accuracy {:.4}, p-rule {:.4}, dFPR {:.4}, dFNR {:.4}",
            last.accuracy, last.p_rule, last.delta_fpr, last.delta_fnr
        );
    }
    Ok(PredictorOutcome {
        model,
        history,
        diverged: None,
    })
}

pub fn train_plain(train: &TabularDataset, cfg: &PredictorConfig, monitor: Option<&TabularDataset>) -> Result<PredictorOutcome> {
    train_predictor(train, None, Objective::Plain, cfg, monitor)
}

pub fn train_dp(
    train: &TabularDataset,
    bank: &ProxyBank,
    lambda: f64,
    cfg: &PredictorConfig,
    monitor: Option<&TabularDataset>,
) -> Result<PredictorOutcome> {
    train_predictor(train, Some(bank), Objective::Dp { lambda }, cfg, monitor)
}

pub fn train_eo(
    train: &TabularDataset,
    bank: &ProxyBank,
    lambda0: f64,
    lambda1: f64,
    cfg: &PredictorConfig,
    monitor: Option<&TabularDataset>,
) -> Result<PredictorOutcome> {
    train_predictor(train, Some(bank), Objective::Eo { lambda0, lambda1 }, cfg, monitor)
}

/// Full metrics of `model` on `ds`. With a bank for the rows of `ds`, also
/// reports `HGR(prediction, z)` measured by a fresh estimator trained on
/// the even rows and evaluated on the odd rows.
pub fn evaluate(
    model: &FairPredictor,
    ds: &TabularDataset,
    bank: Option<&ProxyBank>,
    protocol: &FitProtocol,
    seed: u64,
) -> Result<MetricsReport> {
    let probs = model.predict(ds.features())?;
    let mut report = MetricsReport::from_predictions(&probs, ds.y(), ds.sensitive())?;
    if let Some(bank) = bank {
        if bank.n_rows() != ds.len() {
            return Err(Error::Data(format!("bank has {} rows, dataset has {}", bank.n_rows(), ds.len())));
        }
        let mut rng = stream(seed, 9);
        let all: Vec<usize> = (0..ds.len()).collect();
        let z = bank.draw(&all, &mut rng);
        let p = Tensor::column(probs);
        let even: Vec<usize> = all.iter().copied().step_by(2).collect();
        let odd: Vec<usize> = all.iter().copied().skip(1).step_by(2).collect();
        report.hgr_pred_z = Some(held_out_hgr(
            &p.select_rows(&even),
            &z.select_rows(&even),
            &p.select_rows(&odd),
            &z.select_rows(&odd),
            protocol,
            &mut rng,
        )?);
    }
    Ok(report)
}

/// `row_id, probability, predicted_label` per row.
pub fn write_predictions_csv<W: Write>(row_ids: &[u64], probs: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row_id", "probability", "predicted_label"])?;
    for ((id, p), l) in row_ids.iter().zip(probs).zip(threshold(probs)) {
        out.write_record([id.to_string(), p.to_string(), l.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

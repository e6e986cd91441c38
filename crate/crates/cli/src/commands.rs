use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fairproxy_core::datasets::{synthetic_raw, SyntheticSpec, TabularDataset};
use fairproxy_core::diffcore::Tensor;
use fairproxy_core::fair_predictor::{
    evaluate, train_predictor, write_predictions_csv, FairPredictor, Objective, ProxyBank,
};
use fairproxy_core::hgr::{hgr_oracle, DiscreteJoint};
use fairproxy_core::srcvae::{export_latents, train_inference, SrcvaeModel};
use fairproxy_core::Error;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ObjectiveKind, RunConfig};

/// Where every artifact of a run lives. All names carry the run seed.
pub struct Layout {
    root: PathBuf,
    seed: u64,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
            seed: cfg.seed,
        }
    }

    fn file(&self, stem: &str, ext: &str) -> PathBuf {
        self.root.join(format!("{stem}_s{}.{ext}", self.seed))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join(format!("data_s{}", self.seed))
    }

    pub fn inference_checkpoint(&self) -> PathBuf {
        self.file("inference", "fprx")
    }

    pub fn inference_history(&self) -> PathBuf {
        self.file("inference_history", "csv")
    }

    pub fn bank(&self, split: &str) -> PathBuf {
        self.file(&format!("bank_{split}"), "fplz")
    }

    pub fn moments(&self, split: &str) -> PathBuf {
        self.file(&format!("moments_{split}"), "csv")
    }

    pub fn predictor(&self, tag: &str) -> PathBuf {
        self.file(&format!("predictor_{tag}"), "fprx")
    }

    pub fn predictor_history(&self, tag: &str) -> PathBuf {
        self.file(&format!("predictor_history_{tag}"), "csv")
    }

    pub fn predictions(&self, tag: &str) -> PathBuf {
        self.file(&format!("predictions_{tag}"), "csv")
    }

    pub fn sweep(&self, tag: &str) -> PathBuf {
        self.file(&format!("sweep_{tag}"), "csv")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!("{} not found; run `{hint}` first", path.display())).into());
    }
    Ok(())
}

fn load_split(layout: &Layout, split: &str) -> Result<TabularDataset> {
    let dir = layout.data_dir();
    require(&dir.join(format!("{split}.fprx")), "fairproxy prepare-data")?;
    Ok(TabularDataset::load(&dir, split)?)
}

/// Seeds of the two exported banks, kept apart so their draws differ.
fn bank_seed(seed: u64, split: &str) -> u64 {
    let base = seed.wrapping_mul(2);
    if split == "train" { base } else { base.wrapping_add(1) }
}

pub fn prepare_data(cfg: &RunConfig, subsample: Option<usize>) -> Result<()> {
    if cfg.data_files.is_empty() {
        return Err(Error::Config("data.files must list at least one CSV file".into()).into());
    }
    let paths: Vec<&Path> = cfg.data_files.iter().map(PathBuf::as_path).collect();
    let mut ds = TabularDataset::load_csv(&paths, &cfg.schema)?;
    let n = subsample.unwrap_or(cfg.subsample);
    if n > 0 {
        ds = ds.subsample(n, cfg.seed)?;
    }
    let (train, test) = ds.split(cfg.train_frac, cfg.seed)?;
    let layout = Layout::new(cfg);
    let dir = layout.data_dir();
    train.save(&dir, "train")?;
    test.save(&dir, "test")?;
    info!("prepared {} training and {} test rows in {}", train.len(), test.len(), dir.display());
    println!("{}", dir.display());
    Ok(())
}

fn export_banks(cfg: &RunConfig, layout: &Layout, model: &SrcvaeModel) -> Result<()> {
    for split in ["train", "test"] {
        let ds = load_split(layout, split)?;
        let export = export_latents(model, &ds, cfg.bank_k, bank_seed(cfg.seed, split))?;
        export.save(&layout.bank(split), &layout.moments(split))?;
        info!("wrote {} proxies per row for {} {split} rows", cfg.bank_k, ds.len());
    }
    Ok(())
}

pub fn train_inference_cmd(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let train = load_split(&layout, "train")?;
    let test = load_split(&layout, "test")?;
    let outcome = train_inference(&train, Some(&test), &cfg.inference)?;
    outcome.history.write_csv(create(&layout.inference_history())?)?;
    outcome.model.save(&layout.inference_checkpoint())?;
    if let Some(reason) = outcome.diverged {
        return Err(Error::Divergence(reason).into());
    }
    export_banks(cfg, &layout, &outcome.model)?;
    if let Some(h) = outcome.history.final_hgr() {
        println!("final HGR(x_c, z) = {h:.6}");
    }
    Ok(())
}

pub fn export_latents_cmd(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let path = layout.inference_checkpoint();
    require(&path, "fairproxy train-inference")?;
    let model = SrcvaeModel::load(&path)?;
    export_banks(cfg, &layout, &model)
}

fn load_bank(layout: &Layout, split: &str, rows: usize) -> Result<ProxyBank> {
    let path = layout.bank(split);
    require(&path, "fairproxy train-inference")?;
    let bank = ProxyBank::load(&path)?;
    if bank.n_rows() != rows {
        return Err(Error::Data(format!(
            "{} holds {} rows but the {split} split has {rows}",
            path.display(),
            bank.n_rows()
        ))
        .into());
    }
    Ok(bank)
}

pub fn train_predictor_cmd(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg);
    let train = load_split(&layout, "train")?;
    let test = load_split(&layout, "test")?;
    let objective = cfg.objective();
    let bank = match objective {
        Objective::Plain => None,
        _ => Some(load_bank(&layout, "train", train.len())?),
    };
    let outcome = train_predictor(&train, bank.as_ref(), objective, &cfg.predictor, Some(&test))?;
    let tag = cfg.objective.name();
    outcome.history.write_csv(create(&layout.predictor_history(tag))?)?;
    outcome.model.save(&layout.predictor(tag))?;
    let probs = outcome.model.predict(test.features())?;
    write_predictions_csv(test.row_ids(), &probs, create(&layout.predictions(tag))?)?;
    if let Some(reason) = outcome.diverged {
        return Err(Error::Divergence(reason).into());
    }
    println!("{}", layout.predictor(tag).display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let layout = Layout::new(cfg);
    let path = checkpoint.unwrap_or_else(|| layout.predictor(cfg.objective.name()));
    require(&path, "fairproxy train-predictor")?;
    let model = FairPredictor::load(&path)?;
    let test = load_split(&layout, "test")?;
    let bank = if layout.bank("test").exists() {
        Some(load_bank(&layout, "test", test.len())?)
    } else {
        warn!("no test proxy bank; HGR(prediction, z) is not reported");
        None
    };
    let report = evaluate(&model, &test, bank.as_ref(), &cfg.probe, cfg.seed)?;
    let json = report.to_json()?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("predictor");
    let out = path.with_file_name(format!("metrics_{stem}.json"));
    fs::write(&out, &json).with_context(|| format!("cannot write {}", out.display()))?;
    print!("{json}");
    Ok(())
}

/// Columns of the sweep CSV.
pub const SWEEP_HEADER: [&str; 9] = [
    "lambda", "repeat", "seed", "accuracy", "p_rule", "delta_fpr", "delta_fnr", "dm", "status",
];

struct SweepRow {
    lambda: f64,
    repeat: usize,
    seed: u64,
    metrics: Option<[Option<f64>; 5]>,
    status: String,
}

pub fn sweep_cmd(cfg: &RunConfig, objective: Option<ObjectiveKind>) -> Result<()> {
    let kind = objective.unwrap_or(cfg.objective);
    if kind == ObjectiveKind::Plain {
        bail!(Error::Config("a sweep needs the dp or eo objective".into()));
    }
    let layout = Layout::new(cfg);
    let train = load_split(&layout, "train")?;
    let test = load_split(&layout, "test")?;
    let bank = load_bank(&layout, "train", train.len())?;

    let jobs: Vec<(f64, usize)> = cfg
        .sweep_grid
        .iter()
        .flat_map(|&l| (0..cfg.sweep_repeats).map(move |r| (l, r)))
        .collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(lambda, repeat)| {
            let seed = cfg.seed.wrapping_add(repeat as u64);
            let pcfg = fairproxy_core::fair_predictor::PredictorConfig {
                seed,
                ..cfg.predictor.clone()
            };
            let run = || -> fairproxy_core::Result<(Option<String>, fairproxy_core::metrics::MetricsReport)> {
                let out = train_predictor(&train, Some(&bank), kind.at(lambda), &pcfg, None)?;
                let report = evaluate(&out.model, &test, None, &cfg.probe, seed)?;
                Ok((out.diverged, report))
            };
            match run() {
                Ok((diverged, r)) => SweepRow {
                    lambda,
                    repeat,
                    seed,
                    metrics: Some([Some(r.accuracy), Some(r.p_rule), r.delta_fpr, r.delta_fnr, r.dm]),
                    status: diverged.map_or_else(|| "ok".to_string(), |d| format!("diverged: {d}")),
                },
                Err(e) => {
                    warn!("sweep lambda={lambda} repeat={repeat} failed: {e}");
                    SweepRow {
                        lambda,
                        repeat,
                        seed,
                        metrics: None,
                        status: format!("error: {e}"),
                    }
                }
            }
        })
        .collect();

    let path = layout.sweep(kind.name());
    let mut out = csv::Writer::from_writer(create(&path)?);
    out.write_record(SWEEP_HEADER)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        let mut rec = vec![r.lambda.to_string(), r.repeat.to_string(), r.seed.to_string()];
        match r.metrics {
            Some(m) => rec.extend(m.into_iter().map(cell)),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        rec.push(r.status.clone());
        out.write_record(&rec)?;
    }
    out.flush()?;
    println!("{}", path.display());
    Ok(())
}

fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
    }
    // A first row that does not parse as numbers is a header.
    if rows.first().is_some_and(|r| r.iter().any(|v| v.parse::<f64>().is_err())) {
        rows.remove(0);
    }
    Ok(rows)
}

fn parse_cell<T: std::str::FromStr>(path: &Path, line: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Data(format!("{}: row {line}: cannot parse '{v}'", path.display())).into())
}

/// Exact HGR of a discrete joint given as a weight table or as code pairs.
pub fn oracle_hgr_cmd(table: Option<PathBuf>, pairs: Option<PathBuf>) -> Result<f64> {
    let joint = match (table, pairs) {
        (Some(path), None) => {
            let rows = read_numeric_rows(&path)?;
            let cols = rows.first().map_or(0, Vec::len);
            let mut data = Vec::with_capacity(rows.len() * cols);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != cols {
                    return Err(Error::Data(format!("{}: ragged table at row {}", path.display(), i + 1)).into());
                }
                for v in r {
                    data.push(parse_cell::<f64>(&path, i + 1, v)?);
                }
            }
            DiscreteJoint::from_weights(&Tensor::new(vec![rows.len(), cols], data)?)?
        }
        (None, Some(path)) => {
            let rows = read_numeric_rows(&path)?;
            let (mut u, mut v) = (Vec::new(), Vec::new());
            for (i, r) in rows.iter().enumerate() {
                if r.len() != 2 {
                    return Err(Error::Data(format!("{}: row {} needs two codes", path.display(), i + 1)).into());
                }
                u.push(parse_cell::<usize>(&path, i + 1, &r[0])?);
                v.push(parse_cell::<usize>(&path, i + 1, &r[1])?);
            }
            DiscreteJoint::from_codes(&u, &v)?
        }
        _ => return Err(Error::Config("give exactly one of --table or --pairs".into()).into()),
    };
    Ok(hgr_oracle(&joint)?)
}

/// Writes `synthetic_s<seed>.csv` and `synthetic.schema` into `out`.
pub fn make_synthetic_cmd(rows: usize, seed: u64, spec: &SyntheticSpec, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let raw = synthetic_raw(rows, seed, spec)?;
    fs::create_dir_all(out)?;
    let csv_path = out.join(format!("synthetic_s{seed}.csv"));
    let schema_path = out.join("synthetic.schema");
    let mut w = create(&csv_path)?;
    raw.write_csv(&spec.schema(), &mut w)?;
    w.flush()?;
    fs::write(&schema_path, spec.schema_text())?;
    Ok((csv_path, schema_path))
}

//! Run configuration: one `key = value` per line, `#` starts a comment.
//! Every key is validated before any work starts and unknown keys are
//! rejected. See the README for the full key list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fairproxy_core::datasets::SchemaSpec;
use fairproxy_core::fair_predictor::{Objective, PredictorConfig};
use fairproxy_core::hgr::{FitProtocol, HgrConfig};
use fairproxy_core::mmd::{BandwidthScale, MmdConfig};
use fairproxy_core::srcvae::InferenceConfig;
use fairproxy_core::{Error, Result};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "FAIRPROXY_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Plain,
    Dp,
    Eo,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "dp" => Ok(Self::Dp),
            "eo" => Ok(Self::Eo),
            other => Err(Error::Config(format!("unknown objective '{other}' (plain, dp, eo)"))),
        }
    }
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Dp => "dp",
            Self::Eo => "eo",
        }
    }

    /// The objective at a single sweep weight (`λ_0 = λ_1` for equalized odds).
    pub fn at(self, lambda: f64) -> Objective {
        match self {
            Self::Plain => Objective::Plain,
            Self::Dp => Objective::Dp { lambda },
            Self::Eo => Objective::Eo {
                lambda0: lambda,
                lambda1: lambda,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub schema: SchemaSpec,
    pub data_files: Vec<PathBuf>,
    pub subsample: usize,
    pub train_frac: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub inference: InferenceConfig,
    pub bank_k: usize,
    pub predictor: PredictorConfig,
    pub objective: ObjectiveKind,
    pub lambda: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub sweep_grid: Vec<f64>,
    pub sweep_repeats: usize,
    pub probe: FitProtocol,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, std::env::var(SEED_ENV).ok().as_deref())
    }

    /// Parses config text. Relative paths resolve against `base`;
    /// `seed_override` replaces the `seed` key.
    pub fn parse(text: &str, base: &Path, seed_override: Option<&str>) -> Result<Self> {
        let mut kv = Entries::parse(text)?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };

        let schema = match kv.take("data.schema").as_deref() {
            None => return Err(Error::Config("missing required key 'data.schema'".into())),
            Some(name @ ("adult" | "default")) => SchemaSpec::bundled(name)?,
            Some(path) => SchemaSpec::load(&resolve(path))?,
        };
        let data_files = kv
            .take("data.files")
            .map(|v| split_list(&v).map(resolve).collect())
            .unwrap_or_default();
        let output_dir = resolve(&kv.take("output_dir").unwrap_or_else(|| "runs".into()));

        let mut seed: u64 = kv.parse_or("seed", 0)?;
        if let Some(s) = seed_override {
            seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }

        let adv_default = HgrConfig::default();
        let adversary = HgrConfig {
            hidden: kv.list_or("adversary.hidden", adv_default.hidden.clone())?,
            ascent_steps: kv.parse_or("adversary.ascent_steps", adv_default.ascent_steps)?,
            lr: kv.parse_or("adversary.lr", adv_default.lr)?,
            ..adv_default
        };

        let mmd_default = MmdConfig::default();
        let mmd = MmdConfig {
            bandwidths: kv.list_or("mmd.bandwidths", mmd_default.bandwidths.clone())?,
            scale: match kv.take("mmd.scale").as_deref() {
                None | Some("prior_median") => BandwidthScale::PriorMedian,
                Some("fixed") => BandwidthScale::Fixed,
                Some(other) => return Err(Error::Config(format!("mmd.scale: unknown value '{other}'"))),
            },
            prior_sample_count: kv.parse_or("mmd.prior_samples", 0)?,
            ..mmd_default
        };

        let probe_default = FitProtocol::default();
        let probe = FitProtocol {
            batch: kv.parse_or("probe.batch", probe_default.batch)?,
            outer_steps: kv.parse_or("probe.outer_steps", probe_default.outer_steps)?,
            config: adversary.clone(),
        };

        let d = InferenceConfig::default();
        let inference = InferenceConfig {
            d_z: kv.parse_or("inference.d_z", d.d_z)?,
            hidden: kv.list_or("inference.hidden", d.hidden.clone())?,
            lambda_mmd: kv.parse_or("inference.lambda_mmd", d.lambda_mmd)?,
            lambda_inf: kv.parse_or("inference.lambda_inf", d.lambda_inf)?,
            epochs: kv.parse_or("inference.epochs", d.epochs)?,
            batch_size: kv.parse_or("inference.batch_size", d.batch_size)?,
            lr: kv.parse_or("inference.lr", d.lr)?,
            logvar_min: kv.parse_or("inference.logvar_min", d.logvar_min)?,
            logvar_max: kv.parse_or("inference.logvar_max", d.logvar_max)?,
            hgr_every: kv.parse_or("inference.hgr_every", d.hgr_every)?,
            adversary: adversary.clone(),
            mmd,
            probe: probe.clone(),
            seed,
        };
        let bank_k = kv.parse_or("inference.k", 200)?;

        let p = PredictorConfig::default();
        let predictor = PredictorConfig {
            hidden: kv.list_or("predictor.hidden", p.hidden.clone())?,
            epochs: kv.parse_or("predictor.epochs", p.epochs)?,
            batch_size: kv.parse_or("predictor.batch_size", p.batch_size)?,
            lr: kv.parse_or("predictor.lr", p.lr)?,
            adversary,
            seed,
        };

        let cfg = Self {
            schema,
            data_files,
            subsample: kv.parse_or("data.subsample", 0)?,
            train_frac: kv.parse_or("data.train_frac", 0.8)?,
            output_dir,
            seed,
            inference,
            bank_k,
            predictor,
            objective: kv.parse_or("predictor.objective", ObjectiveKind::Dp)?,
            lambda: kv.parse_or("predictor.lambda", 0.0)?,
            lambda0: kv.parse_or("predictor.lambda0", 0.0)?,
            lambda1: kv.parse_or("predictor.lambda1", 0.0)?,
            sweep_grid: kv.list_or("sweep.grid", vec![0.0, 0.24, 0.35, 0.45, 0.48, 0.5])?,
            sweep_repeats: kv.parse_or("sweep.repeats", 5)?,
            probe,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!("data.train_frac {} not in (0, 1)", self.train_frac));
        }
        if self.bank_k == 0 {
            return bad("inference.k must be at least 1".into());
        }
        if self.sweep_repeats == 0 || self.sweep_grid.is_empty() {
            return bad("sweep needs a non-empty grid and at least one repeat".into());
        }
        for (name, v) in [
            ("predictor.lambda", self.lambda),
            ("predictor.lambda0", self.lambda0),
            ("predictor.lambda1", self.lambda1),
        ]
        .into_iter()
        .chain(self.sweep_grid.iter().map(|&v| ("sweep.grid", v)))
        {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if self.probe.batch == 0 || self.probe.outer_steps == 0 {
            return bad("probe.batch and probe.outer_steps must be positive".into());
        }
        if self.inference.adversary.ascent_steps == 0 {
            return bad("adversary.ascent_steps must be positive".into());
        }
        self.inference.validate()?;
        self.predictor.validate()
    }

    /// The objective selected by `predictor.objective` and its weights.
    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Plain => Objective::Plain,
            ObjectiveKind::Dp => Objective::Dp { lambda: self.lambda },
            ObjectiveKind::Eo => Objective::Eo {
                lambda0: self.lambda0,
                lambda1: self.lambda1,
            },
        }
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Key-value pairs that are consumed as they are read, so leftovers are
/// exactly the unknown keys.
struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", i + 1)));
            }
        }
        Ok(Self { map })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: invalid value '{v}' for '{key}'"))),
        }
    }

    fn list_or<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.map.remove(key) {
            None => Ok(default),
            Some((line, v)) => split_list(&v)
                .map(|item| {
                    item.parse()
                        .map_err(|_| Error::Config(format!("line {line}: invalid list item '{item}' for '{key}'")))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

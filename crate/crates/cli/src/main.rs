mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fairproxy_core::datasets::SyntheticSpec;
use fairproxy_core::Error;

use config::{ObjectiveKind, RunConfig};

#[derive(Parser)]
#[command(name = "fairproxy", version, about = "Fair classification with an inferred sensitive proxy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, encode and split the raw CSV files.
    PrepareData {
        #[arg(long)]
        config: PathBuf,
        /// Keep only this many randomly chosen rows before splitting.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Train the proxy inference model and export proxy banks.
    TrainInference {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-export proxy banks from a trained inference checkpoint.
    ExportLatents {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one predictor with the configured objective.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report fairness and accuracy metrics of a predictor on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the predictor trained with the configured objective.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate predictors over the configured grid of weights.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `predictor.objective` (dp or eo).
        #[arg(long)]
        objective: Option<String>,
    },
    /// Exact HGR of a discrete joint distribution.
    OracleHgr {
        /// CSV matrix of non-negative joint weights.
        #[arg(long, conflicts_with = "pairs")]
        table: Option<PathBuf>,
        /// CSV with two integer code columns, one observation per row.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Write a synthetic dataset with a known sensitive attribute and its schema.
    MakeSynthetic {
        #[arg(long)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        n_xc: usize,
        #[arg(long, default_value_t = 3)]
        n_xd: usize,
        #[arg(long)]
        s_to_xd: Option<f64>,
        #[arg(long)]
        s_to_y: Option<f64>,
        #[arg(long)]
        xd_shift_neg_s1: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { config, subsample } => commands::prepare_data(&RunConfig::load(&config)?, subsample),
        Command::TrainInference { config } => commands::train_inference_cmd(&RunConfig::load(&config)?),
        Command::ExportLatents { config } => commands::export_latents_cmd(&RunConfig::load(&config)?),
        Command::TrainPredictor { config } => commands::train_predictor_cmd(&RunConfig::load(&config)?),
        Command::Evaluate { config, checkpoint } => commands::evaluate_cmd(&RunConfig::load(&config)?, checkpoint),
        Command::Sweep { config, objective } => {
            let objective = objective.map(|o| o.parse::<ObjectiveKind>()).transpose()?;
            commands::sweep_cmd(&RunConfig::load(&config)?, objective)
        }
        Command::OracleHgr { table, pairs } => {
            println!("{:.6}", commands::oracle_hgr_cmd(table, pairs)?);
            Ok(())
        }
        Command::MakeSynthetic {
            rows,
            seed,
            out,
            n_xc,
            n_xd,
            s_to_xd,
            s_to_y,
            xd_shift_neg_s1,
        } => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                n_xc,
                n_xd,
                s_to_xd: s_to_xd.unwrap_or(d.s_to_xd),
                s_to_y: s_to_y.unwrap_or(d.s_to_y),
                xd_shift_neg_s1: xd_shift_neg_s1.unwrap_or(d.xd_shift_neg_s1),
                ..d
            };
            let (csv, schema) = commands::make_synthetic_cmd(rows, seed, &spec, &out)?;
            println!("{}\n{}", csv.display(), schema.display());
            Ok(())
        }
    }
}

/// 2 for configuration problems, 3 for data problems, 4 for divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Schema(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Data(_) | Error::Format { .. } | Error::Csv(_) | Error::Json(_) | Error::Io(_)) => 3,
        Some(Error::Divergence(_) | Error::NonFinite(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use attrassist::datapipe::{generate_synthetic, DatasetManifest, NormStats, Split, SyntheticSpec};
use attrassist::evalkit::{evaluate, export_features, lambda_sweep, resolution_sweep, EvalMode, ExperimentData, Variant};
use attrassist::model::Model;
use attrassist::trainer::{load_checkpoint, resume, train, TrainConfig, TrainData};
use attrassist::{Error, Result};

#[derive(Parser)]
#[command(name = "attrassist", version, about = "Attribute-assisted low-resolution classification")]
struct Cli {
    /// Overrides the seed from the config or checkpoint.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.jsonl into the run directory.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total epoch count when resuming.
        #[arg(long, requires = "resume")]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to the resolution the model was trained at.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum, default_value = "trained-head")]
        mode: ModeArg,
    },
    /// Sweep λ or resolution over seeds; prints the result as JSON.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', conflicts_with = "resolutions")]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "ce,proposed")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Directory for per-cell run directories.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write raw features and a 2-D PCA projection for a split.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    TrainedHead,
    EuclideanCentroid,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TrainedHead => EvalMode::TrainedHead,
            ModeArg::EuclideanCentroid => EvalMode::EuclideanCentroid,
        }
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn manifest_and_norm(path: &Path) -> Result<(DatasetManifest, NormStats)> {
    Ok((DatasetManifest::load(path)?, NormStats::load(&NormStats::sidecar_path(path))?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let mut spec = SyntheticSpec::load(&spec)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let manifest = generate_synthetic(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume: from,
            epochs,
        } => {
            let outcome = match from {
                Some(ckpt) => {
                    let mut ckpt = load_checkpoint(&ckpt)?;
                    if let Some(s) = cli.seed {
                        ckpt.state.seed = s;
                    }
                    let td = TrainData::load(&data, ckpt.config.resolution, ckpt.config.workers)?;
                    resume(ckpt, &td, Some(&out), epochs)?
                }
                None => {
                    let cfg = load_config(config.as_deref().expect("clap enforces --config"), cli.seed)?;
                    let td = TrainData::load(&data, cfg.resolution, cfg.workers)?;
                    train(&cfg, &td, Some(&out))?
                }
            };
            if let Some(last) = outcome.state.history.last() {
                print_json(last)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            resolution,
            mode,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = Model::new(ckpt.model.clone())?;
            let res = resolution.unwrap_or(ckpt.model.input_resolution);
            let (manifest, norm) = manifest_and_norm(&data)?;
            let report = evaluate(&model, &ckpt.params, &manifest, &norm, split, res, mode.into(), ckpt.config.workers)?;
            print_json(&report)?;
        }
        Command::Sweep {
            config,
            data,
            lambda,
            resolutions,
            variants,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            if !lambda.is_empty() {
                let exp = ExperimentData::load(&data, cfg.resolution, cfg.workers)?;
                print_json(&lambda_sweep(&cfg, &exp, &lambda, &seeds, out.as_deref())?)?;
            } else if !resolutions.is_empty() {
                let sweep = resolution_sweep(
                    &cfg,
                    &resolutions,
                    &variants,
                    &seeds,
                    |res| ExperimentData::load(&data, res, cfg.workers),
                    out.as_deref(),
                )?;
                eprint!("{}", sweep.render_table());
                print_json(&sweep)?;
            } else {
                return Err(Error::InvalidArgument("sweep needs --lambda or --resolutions".to_string()));
            }
        }
        Command::ExportFeatures {
            checkpoint,
            data,
            split,
            resolution,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let model = Model::new(ckpt.model.clone())?;
            let res = resolution.unwrap_or(ckpt.model.input_resolution);
            let (manifest, norm) = manifest_and_norm(&data)?;
            let pca = export_features(&model, &ckpt.params, &manifest, &norm, split, res, &out)?;
            print_json(&serde_json::json!({ "out": out, "explained_variance": pca.variances }))?;
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    let line = serde_json::to_string(&ErrorLine { error: kind, message }).unwrap_or_default();
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().lines().next().unwrap_or_default().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_loaded, EvalMode, EvalReport};
use crate::datapipe::{load_split, DatasetManifest, NormStats, Split, SplitData};
use crate::error::{Error, Result};
use crate::trainer::{train, TrainConfig, TrainData, TrainOutcome};

/// Train/val/test splits of one manifest loaded at one resolution.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: TrainData,
    pub test: SplitData,
}

impl ExperimentData {
    pub fn load(manifest_path: &Path, resolution: usize, workers: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let norm = NormStats::load(&NormStats::sidecar_path(manifest_path))?;
        Ok(Self {
            train: TrainData::from_manifest(&manifest, &norm, resolution, workers)?,
            test: load_split(&manifest, Split::Test, resolution, &norm, workers)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.test.resolution()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Cross-entropy only; no center bank.
    Ce,
    /// Cross-entropy plus the attribute term at the configured λ.
    Proposed,
}

impl Variant {
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        TrainConfig {
            attribute_enabled: self == Variant::Proposed,
            ..config.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ce => "ce",
            Variant::Proposed => "proposed",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "ce-only" => Ok(Variant::Ce),
            "proposed" => Ok(Variant::Proposed),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// One trained and evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lambda: f64,
    pub seed: u64,
    pub resolution: usize,
    pub attribute_enabled: bool,
    pub test_top1: f64,
    pub report: EvalReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Lambda,
    Resolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_top1: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    pub runs: Vec<RunSummary>,
}

impl SweepResult {
    /// Point with the highest mean top-1 (first among ties).
    pub fn best(&self) -> Option<&SweepPoint> {
        self.points
            .iter()
            .fold(None, |best: Option<&SweepPoint>, p| match best {
                Some(b) if b.mean_top1 >= p.mean_top1 => Some(b),
                _ => Some(p),
            })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Train `config` on `data` and evaluate the trained head on the test split.
pub fn run_cell(config: &TrainConfig, data: &ExperimentData, out: Option<&Path>) -> Result<(TrainOutcome, RunSummary)> {
    let outcome = train(config, &data.train, out)?;
    let report = evaluate_loaded(
        &outcome.model,
        &outcome.params,
        &data.test,
        None,
        &data.train.attributes,
        EvalMode::TrainedHead,
        config.eval_batch,
    )?;
    let summary = RunSummary {
        lambda: config.lambda,
        seed: config.seed,
        resolution: config.resolution,
        attribute_enabled: config.attribute_enabled,
        test_top1: report.top_k[&1],
        report,
    };
    Ok((outcome, summary))
}

fn check_grid(values: usize, seeds: &[u64], min_values: usize) -> Result<()> {
    if values < min_values || seeds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sweep needs at least {min_values} values and one seed"
        )));
    }
    Ok(())
}

/// One run per `(λ, seed)`; runs with the same seed share their initialization.
pub fn lambda_sweep(
    base: &TrainConfig,
    data: &ExperimentData,
    lambdas: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<SweepResult> {
    check_grid(lambdas.len(), seeds, 2)?;
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for &lambda in lambdas {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                lambda,
                seed,
                resolution: data.resolution(),
                ..base.clone()
            };
            let dir = out.map(|o| o.join(format!("lambda_{lambda}_seed_{seed}")));
            let (_, summary) = run_cell(&cfg, data, dir.as_deref())?;
            per_seed.push(summary.test_top1);
            runs.push(summary);
        }
        points.push(SweepPoint {
            value: lambda,
            mean_top1: mean(&per_seed),
            per_seed,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::Lambda,
        seeds: seeds.to_vec(),
        points,
        runs,
    })
}

/// Improvement of the proposed variant over CE-only at one resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub resolution: usize,
    pub ce_top1: f64,
    pub proposed_top1: f64,
    pub delta: f64,
    pub per_seed_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSweep {
    pub variants: BTreeMap<Variant, SweepResult>,
}

impl ResolutionSweep {
    /// Rows exist only when both variants were run.
    pub fn improvement_table(&self) -> Vec<ImprovementRow> {
        let (Some(ce), Some(pr)) = (self.variants.get(&Variant::Ce), self.variants.get(&Variant::Proposed)) else {
            return Vec::new();
        };
        ce.points
            .iter()
            .zip(&pr.points)
            .map(|(c, p)| {
                let per_seed_delta: Vec<f64> = p.per_seed.iter().zip(&c.per_seed).map(|(a, b)| a - b).collect();
                ImprovementRow {
                    resolution: c.value as usize,
                    ce_top1: c.mean_top1,
                    proposed_top1: p.mean_top1,
                    delta: mean(&per_seed_delta),
                    per_seed_delta,
                }
            })
            .collect()
    }

    /// Plain-text comparison table.
    pub fn render_table(&self) -> String {
        let mut s = String::from("resolution  ce-only  proposed  delta\n");
        for r in self.improvement_table() {
            let _ = writeln!(
                s,
                "{:>10}  {:>7}  {:>8}  {:>+6.2}",
                format!("{0}x{0}", r.resolution),
                super::format_percent(r.ce_top1),
                super::format_percent(r.proposed_top1),
                r.delta
            );
        }
        s
    }
}

/// Train every variant at every resolution for every seed. `load` supplies
/// the data for a resolution.
pub fn resolution_sweep(
    base: &TrainConfig,
    resolutions: &[usize],
    variants: &[Variant],
    seeds: &[u64],
    mut load: impl FnMut(usize) -> Result<ExperimentData>,
    out: Option<&Path>,
) -> Result<ResolutionSweep> {
    check_grid(resolutions.len(), seeds, 1)?;
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no variants to sweep".to_string()));
    }
    let mut results: BTreeMap<Variant, SweepResult> = variants
        .iter()
        .map(|&v| {
            (
                v,
                SweepResult {
                    axis: SweepAxis::Resolution,
                    seeds: seeds.to_vec(),
                    points: Vec::new(),
                    runs: Vec::new(),
                },
            )
        })
        .collect();
    for &res in resolutions {
        let data = load(res)?;
        for (&variant, result) in results.iter_mut() {
            let mut per_seed = Vec::new();
            for &seed in seeds {
                let cfg = variant.apply(&TrainConfig {
                    seed,
                    resolution: res,
                    batch_size: base.batch_size,
                    ..base.clone()
                });
                let dir = out.map(|o| o.join(format!("{}_{res}px_seed_{seed}", variant.name())));
                let (_, summary) = run_cell(&cfg, &data, dir.as_deref())?;
                per_seed.push(summary.test_top1);
                result.runs.push(summary);
            }
            result.points.push(SweepPoint {
                value: res as f64,
                mean_top1: mean(&per_seed),
                per_seed,
            });
        }
    }
    Ok(ResolutionSweep { variants: results })
}

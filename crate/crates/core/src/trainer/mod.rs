//! SGD training loop with the attribute-assisted objective, step learning-rate
//! schedule, center maintenance, per-epoch checkpoints and JSON-lines metrics.

mod checkpoint;
mod config;
mod optim;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{default_batch_size, lr_at, TrainConfig};
pub use optim::{decays, sgd_step};

use crate::attrloss::{attribute_term, combined_loss, combined_loss_var, recompute_centers, AttributeCenterBank, LossBreakdown};
use crate::datapipe::{iterate_batches, load_split, Batch, ClassAttributeMap, DatasetManifest, NormStats, Split, SplitData};
use crate::diffcore::{Mode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::top_k_accuracy;
use crate::model::{Model, ParamKind, ParameterSet};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub attr: f64,
    pub total: f64,
    pub val_top1: f64,
    pub seconds: Option<f64>,
}

/// Optimizer and bookkeeping state of a run. `epoch` is the next epoch to run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunState {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
    pub velocities: BTreeMap<String, Tensor>,
    pub history: Vec<EpochMetrics>,
}

/// In-memory splits at one resolution plus the class → attribute map.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: SplitData,
    pub val: SplitData,
    pub attributes: ClassAttributeMap,
    pub num_classes: usize,
}

impl TrainData {
    /// Load train and val splits, normalized with the manifest's sidecar
    /// statistics.
    pub fn load(manifest_path: &Path, resolution: usize, workers: usize) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let norm = NormStats::load(&NormStats::sidecar_path(manifest_path))?;
        Self::from_manifest(&manifest, &norm, resolution, workers)
    }

    pub fn from_manifest(manifest: &DatasetManifest, norm: &NormStats, resolution: usize, workers: usize) -> Result<Self> {
        manifest.check_trainable()?;
        let attributes = manifest.class_attributes()?;
        for c in manifest.classes() {
            attributes.attribute_of(c)?;
        }
        Ok(Self {
            train: load_split(manifest, Split::Train, resolution, norm, workers)?,
            val: load_split(manifest, Split::Val, resolution, norm, workers)?,
            attributes,
            num_classes: manifest.num_classes(),
        })
    }
}

/// Result of a finished (or resumed and finished) run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub bank: Option<AttributeCenterBank>,
    pub state: RunState,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            bank: self.bank.clone(),
            state: self.state.clone(),
        }
    }
}

/// Loss, gradients and side outputs of one training batch.
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: BTreeMap<String, Tensor>,
    pub features: Tensor,
    pub buffer_updates: Vec<(String, Tensor)>,
}

/// Whether the attribute term takes part in the objective right now.
fn attr_active<'a>(config: &TrainConfig, bank: Option<&'a AttributeCenterBank>) -> Option<&'a AttributeCenterBank> {
    bank.filter(|b| config.attribute_enabled && !b.awaiting_recompute())
}

/// Forward and backward on one batch without updating anything.
pub fn batch_step(
    model: &Model,
    params: &ParameterSet,
    bank: Option<&AttributeCenterBank>,
    config: &TrainConfig,
    batch: &Batch,
) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, params, &batch.images, Mode::Train, true)?;
    let ce = tape.softmax_cross_entropy(out.logits, &batch.classes)?;
    let ce_value = tape.value(ce).item()?;
    let (root, loss) = match attr_active(config, bank) {
        Some(bank) => {
            let attr = attribute_term(&mut tape, out.features, &batch.attributes, bank, config.attr_reduction)?;
            let attr_value = tape.value(attr).item()?;
            let root = combined_loss_var(&mut tape, ce, attr, config.lambda)?;
            (root, combined_loss(ce_value, attr_value, config.lambda)?)
        }
        None => (ce, combined_loss(ce_value, 0.0, 0.0)?),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", loss.total)));
    }
    tape.backward(root)?;
    let mut grads = BTreeMap::new();
    for (name, p) in params.iter() {
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let var = out.param_vars.get(name).ok_or_else(|| Error::InvalidArgument(format!("{name} unused")))?;
        let g = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(p.tensor.shape()));
        grads.insert(name.to_string(), g);
    }
    Ok(BatchResult {
        loss,
        grads,
        features: tape.value(out.features).clone(),
        buffer_updates: out.buffer_updates,
    })
}

/// Top-1 accuracy of the trained head on `data`.
pub fn head_top1(model: &Model, params: &ParameterSet, data: &SplitData, chunk: usize) -> Result<f64> {
    let mut logits = Vec::new();
    for batch in data.chunks(chunk) {
        logits.push(model.infer(params, &batch)?.1);
    }
    if logits.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".to_string()));
    }
    top_k_accuracy(&Tensor::concat_rows(&logits)?, data.classes(), 1)
}

/// Where a run writes its artifacts.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let ckpt = root.join("checkpoints");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, epochs_done: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epochs_done:04}.atrl"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.root.join("model.atrl")
    }

    fn rewrite_metrics(&self, history: &[EpochMetrics]) -> Result<()> {
        let mut text = String::new();
        for m in history {
            text.push_str(&metrics_line(m));
        }
        let path = self.metrics_path();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn append_metrics(&self, m: &EpochMetrics) -> Result<()> {
        let path = self.metrics_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(metrics_line(m).as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

fn metrics_line(m: &EpochMetrics) -> String {
    let mut s = serde_json::to_string(m).expect("metrics serialize");
    s.push('\n');
    s
}

/// Train from scratch.
pub fn train(config: &TrainConfig, data: &TrainData, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.resolution() != config.resolution {
        return Err(Error::Config(format!(
            "data loaded at {} px but config asks for {} px",
            data.train.resolution(),
            config.resolution
        )));
    }
    let model = Model::new(config.model_config(data.num_classes))?;
    let params = model.init_params(config.seed)?;
    let bank = if config.attribute_enabled {
        let mut bank = AttributeCenterBank::new(
            data.train.classes().iter().map(|&c| data.attributes.attribute_of(c)).collect::<Result<Vec<_>>>()?,
            config.feature_dim,
            config.center_alpha,
        )?;
        bank.init_centers(config.center_init);
        Some(bank)
    } else {
        None
    };
    let outcome = TrainOutcome {
        model,
        config: config.clone(),
        params,
        bank,
        state: RunState {
            seed: config.seed,
            lr: lr_at(0, config.lr0, config.lr_step),
            ..RunState::default()
        },
    };
    let dir = out.map(RunDir::create).transpose()?;
    if let Some(d) = &dir {
        d.rewrite_metrics(&[])?;
    }
    run_epochs(outcome, data, dir.as_ref(), config.epochs)
}

/// Continue a run from a checkpoint up to `epochs` total (the checkpoint's
/// configured count when `None`). The metrics file is rewritten from the
/// checkpoint's history first.
pub fn resume(ckpt: Checkpoint, data: &TrainData, out: Option<&Path>, epochs: Option<usize>) -> Result<TrainOutcome> {
    let mut config = ckpt.config.clone();
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    let outcome = TrainOutcome {
        model: Model::new(ckpt.model)?,
        config: config.clone(),
        params: ckpt.params,
        bank: ckpt.bank,
        state: ckpt.state,
    };
    let dir = out.map(RunDir::create).transpose()?;
    if let Some(d) = &dir {
        d.rewrite_metrics(&outcome.state.history)?;
    }
    run_epochs(outcome, data, dir.as_ref(), config.epochs)
}

fn run_epochs(mut run: TrainOutcome, data: &TrainData, dir: Option<&RunDir>, epochs: usize) -> Result<TrainOutcome> {
    let cfg = run.config.clone();
    let batch_size = cfg.batch_size();
    while run.state.epoch < epochs {
        let epoch = run.state.epoch;
        let started = Instant::now();
        let lr = lr_at(epoch, cfg.lr0, cfg.lr_step);
        run.state.lr = lr;
        let (mut ce, mut attr, mut total, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in iterate_batches(&data.train, &data.attributes, batch_size, cfg.augment, run.state.seed, epoch as u64)? {
            let n = batch.classes.len();
            let result = batch_step(&run.model, &run.params, run.bank.as_ref(), &cfg, &batch)?;
            sgd_step(&mut run.params, &result.grads, &mut run.state.velocities, lr, cfg.momentum, cfg.weight_decay)?;
            for (name, t) in result.buffer_updates {
                *run.params.tensor_mut(&name)? = t;
            }
            if let Some(bank) = run.bank.as_mut().filter(|b| !b.awaiting_recompute()) {
                bank.update_ema(&result.features, &batch.attributes)?;
            }
            run.state.step += 1;
            ce += result.loss.ce_term * n as f64;
            attr += result.loss.attr_term * n as f64;
            total += result.loss.total * n as f64;
            seen += n;
        }
        if let Some(bank) = run.bank.as_mut() {
            let every = cfg.center_recompute_every;
            if bank.awaiting_recompute() || (every > 0 && (epoch + 1) % every == 0) {
                recompute_centers(&run.model, &run.params, &data.train, &data.attributes, bank, cfg.eval_batch)?;
            }
        }
        let val_top1 = head_top1(&run.model, &run.params, &data.val, cfg.eval_batch)?;
        let n = seen.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            ce: ce / n,
            attr: attr / n,
            total: total / n,
            val_top1,
            seconds: cfg.log_timing.then(|| started.elapsed().as_secs_f64()),
        };
        run.state.history.push(metrics.clone());
        run.state.epoch += 1;
        if let Some(d) = dir {
            d.append_metrics(&metrics)?;
            save_checkpoint(&run.checkpoint(), &d.checkpoint_path(run.state.epoch))?;
        }
    }
    if let Some(d) = dir {
        save_checkpoint(&run.checkpoint(), &d.final_path())?;
    }
    Ok(run)
}

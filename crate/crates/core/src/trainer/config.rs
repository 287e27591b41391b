use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attrloss::CenterInit;
use crate::diffcore::Reduction;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Training hyperparameters and network shape, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs between ×0.1 learning-rate decays; 0 disables decay.
    pub lr_step: usize,
    /// Falls back to [`default_batch_size`] for the resolution when unset.
    pub batch_size: Option<usize>,
    pub resolution: usize,
    pub seed: u64,
    pub center_alpha: f64,
    /// Epochs between exact center recomputes; 0 disables them.
    pub center_recompute_every: usize,
    pub attr_reduction: Reduction,
    pub center_init: CenterInit,
    /// False trains with cross-entropy only and keeps no center bank.
    pub attribute_enabled: bool,
    pub augment: bool,
    pub workers: usize,
    /// Record wall-clock seconds per epoch in metrics; off keeps metric files
    /// byte-identical across runs.
    pub log_timing: bool,
    pub eval_batch: usize,

    pub channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub feature_dim: usize,
    pub use_residual: bool,
    pub use_batchnorm: bool,
    pub stem_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.01,
            epochs: 100,
            lr_step: 20,
            batch_size: None,
            resolution: 32,
            seed: 0,
            center_alpha: 0.5,
            center_recompute_every: 1,
            attr_reduction: Reduction::Mean,
            center_init: CenterInit::Zeros,
            attribute_enabled: true,
            augment: true,
            workers: 1,
            log_timing: false,
            eval_batch: 200,
            channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            feature_dim: 64,
            use_residual: true,
            use_batchnorm: true,
            stem_stride: 1,
        }
    }
}

/// Batch sizes used at the standard resolutions: 400 up to 48 px, 100 at 64 px,
/// 50 from 224 px; in between, the value of the next smaller standard size.
pub fn default_batch_size(resolution: usize) -> usize {
    match resolution {
        0..=48 => 400,
        49..=223 => 100,
        _ => 50,
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or_else(|| default_batch_size(self.resolution))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda", self.lambda),
            ("lr0", self.lr0),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.center_alpha >= 0.0 && self.center_alpha <= 1.0) {
            return bad(format!("center_alpha {} outside [0, 1]", self.center_alpha));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.resolution == 0 || self.eval_batch == 0 {
            return bad("resolution and eval_batch must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_resolution: self.resolution,
            in_channels: 3,
            channels: self.channels.clone(),
            blocks_per_stage: self.blocks_per_stage.clone(),
            feature_dim: self.feature_dim,
            num_classes,
            use_residual: self.use_residual,
            use_batchnorm: self.use_batchnorm,
            stem_stride: self.stem_stride,
        }
    }
}

/// `lr0 · 0.1^⌊epoch / lr_step⌋`.
pub fn lr_at(epoch: usize, lr0: f64, lr_step: usize) -> f64 {
    if lr_step == 0 {
        return lr0;
    }
    lr0 / 10f64.powi((epoch / lr_step) as i32)
}

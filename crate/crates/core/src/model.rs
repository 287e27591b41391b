//! Compact residual CNN exposing the pooled feature `f(x)` and class logits.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchNormConfig, Mode, PoolKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_resolution: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub use_residual: bool,
    pub use_batchnorm: bool,
    /// Stride of the stem convolution.
    #[serde(default = "default_stem_stride")]
    pub stem_stride: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_stem_stride() -> usize {
    1
}

impl ModelConfig {
    /// Stages (16, 32, 64), two blocks each, 64-d features.
    pub fn tiny_resnet(input_resolution: usize, num_classes: usize) -> Self {
        Self {
            input_resolution,
            in_channels: 3,
            channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            feature_dim: 64,
            num_classes,
            use_residual: true,
            use_batchnorm: true,
            stem_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one stage".to_string()));
        }
        if self.channels.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} block counts",
                self.channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if let Some(s) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("stage {s} has zero width")));
        }
        if let Some(s) = self.blocks_per_stage.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("stage {s} has zero blocks")));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".to_string()));
        }
        if self.input_resolution == 0 || self.in_channels == 0 || self.stem_stride == 0 {
            return Err(Error::Config(
                "input_resolution, in_channels and stem_stride must be positive".to_string(),
            ));
        }
        Ok(())
    }

    fn last_width(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    /// Updated by rule (running statistics); never receives gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named tensors of one model, kept in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k, &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values over all trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
    kind: ParamKind,
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Var,
    /// Output of the stem (after its activation).
    pub stem: Var,
    /// Tape leaves created for each parameter, by name.
    pub param_vars: BTreeMap<String, Var>,
    /// New running statistics from train-mode normalization.
    pub buffer_updates: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    bn: BatchNormConfig,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            bn: BatchNormConfig::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn needs_projection(&self, stride: usize, cin: usize, cout: usize) -> bool {
        self.config.use_residual && (stride != 1 || cin != cout)
    }

    /// Block geometry: (stage, block, stride, in width, out width).
    fn blocks(&self) -> Vec<(usize, usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.config.channels[0];
        for (s, (&width, &count)) in self
            .config
            .channels
            .iter()
            .zip(&self.config.blocks_per_stage)
            .enumerate()
        {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push((s, b, stride, cin, width));
                cin = width;
            }
        }
        out
    }

    fn layout(&self) -> Vec<Slot> {
        let cfg = &self.config;
        let mut slots = Vec::new();
        let conv = |slots: &mut Vec<Slot>, prefix: &str, cout: usize, cin: usize, k: usize| {
            slots.push(Slot {
                name: format!("{prefix}.conv.weight"),
                shape: vec![cout, cin, k, k],
                init: Init::HeNormal { fan_in: cin * k * k },
                kind: ParamKind::Trainable,
            });
            if cfg.use_batchnorm {
                for (suffix, init, kind) in [
                    ("gamma", Init::Ones, ParamKind::Trainable),
                    ("beta", Init::Zeros, ParamKind::Trainable),
                    ("running_mean", Init::Zeros, ParamKind::Buffer),
                    ("running_var", Init::Ones, ParamKind::Buffer),
                ] {
                    slots.push(Slot {
                        name: format!("{prefix}.bn.{suffix}"),
                        shape: vec![cout],
                        init,
                        kind,
                    });
                }
            } else {
                slots.push(Slot {
                    name: format!("{prefix}.conv.bias"),
                    shape: vec![cout],
                    init: Init::Zeros,
                    kind: ParamKind::Trainable,
                });
            }
        };
        conv(&mut slots, "stem", cfg.channels[0], cfg.in_channels, 3);
        for (s, b, stride, cin, cout) in self.blocks() {
            let p = format!("stage{s}.block{b}");
            conv(&mut slots, &format!("{p}.branch1"), cout, cin, 3);
            conv(&mut slots, &format!("{p}.branch2"), cout, cout, 3);
            if self.needs_projection(stride, cin, cout) {
                conv(&mut slots, &format!("{p}.shortcut"), cout, cin, 1);
            }
        }
        let last = cfg.last_width();
        let linear = |slots: &mut Vec<Slot>, prefix: &str, din: usize, dout: usize| {
            slots.push(Slot {
                name: format!("{prefix}.weight"),
                shape: vec![din, dout],
                init: Init::HeNormal { fan_in: din },
                kind: ParamKind::Trainable,
            });
            slots.push(Slot {
                name: format!("{prefix}.bias"),
                shape: vec![dout],
                init: Init::Zeros,
                kind: ParamKind::Trainable,
            });
        };
        if cfg.feature_dim != last {
            linear(&mut slots, "proj", last, cfg.feature_dim);
        }
        linear(&mut slots, "head", cfg.feature_dim, cfg.num_classes);
        slots
    }

    /// Fan-in scaled normal weights, zero biases, unit gains; deterministic in `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for slot in self.layout() {
            let n: usize = slot.shape.iter().product();
            let data = match slot.init {
                Init::HeNormal { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(slot.name, Tensor::new(slot.shape, data)?, slot.kind)?;
        }
        Ok(params)
    }

    /// Records a forward pass on `tape`.
    ///
    /// `track` makes trainable parameters grad-tracked leaves. Train mode
    /// normalizes with batch statistics and reports new running statistics in
    /// [`ForwardOutput::buffer_updates`] without touching `params`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        batch: &Tensor,
        mode: Mode,
        track: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let r = cfg.input_resolution;
        match *batch.shape() {
            [_, c, h, w] if c == cfg.in_channels && h == r && w == r => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "input shape {:?} does not match N×{}×{r}×{r}",
                    batch.shape(),
                    cfg.in_channels
                )))
            }
        }
        let mut ctx = Ctx {
            tape,
            params,
            mode,
            track,
            bn: self.bn,
            use_bn: cfg.use_batchnorm,
            vars: BTreeMap::new(),
            updates: Vec::new(),
        };
        let x = ctx.tape.constant(batch.clone());
        let h = ctx.conv_norm("stem", x, cfg.stem_stride, 1)?;
        let stem = ctx.tape.relu(h);
        let mut h = stem;
        for (s, b, stride, cin, cout) in self.blocks() {
            let p = format!("stage{s}.block{b}");
            let y = ctx.conv_norm(&format!("{p}.branch1"), h, stride, 1)?;
            let y = ctx.tape.relu(y);
            let y = ctx.conv_norm(&format!("{p}.branch2"), y, 1, 1)?;
            let y = if cfg.use_residual {
                let skip = if self.needs_projection(stride, cin, cout) {
                    ctx.conv_norm(&format!("{p}.shortcut"), h, stride, 0)?
                } else {
                    h
                };
                ctx.tape.add(y, skip)?
            } else {
                y
            };
            h = ctx.tape.relu(y);
        }
        let pooled = ctx.tape.pool2d(PoolKind::GlobalAvg, h, 0, 0)?;
        let features = if cfg.feature_dim != cfg.last_width() {
            ctx.linear("proj", pooled)?
        } else {
            pooled
        };
        let logits = ctx.linear("head", features)?;
        Ok(ForwardOutput {
            features,
            logits,
            stem,
            param_vars: ctx.vars,
            buffer_updates: ctx.updates,
        })
    }

    /// Eval-mode features and logits as plain tensors.
    pub fn infer(&self, params: &ParameterSet, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, batch, Mode::Eval, false)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    /// Eval-mode inference over `images` in chunks of `chunk` rows.
    pub fn infer_chunked(&self, params: &ParameterSet, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let n = images.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut feats = Vec::new();
        let mut logits = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let (f, l) = self.infer(params, &images.slice_rows(start, end)?)?;
            feats.push(f);
            logits.push(l);
            start = end;
        }
        if feats.is_empty() {
            return Ok((
                Tensor::zeros(&[0, self.config.feature_dim]),
                Tensor::zeros(&[0, self.config.num_classes]),
            ));
        }
        Ok((Tensor::concat_rows(&feats)?, Tensor::concat_rows(&logits)?))
    }
}

/// Convenience for `Model::new(config)?.init_params(seed)`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    Model::new(config.clone())?.init_params(seed)
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a ParameterSet,
    mode: Mode,
    track: bool,
    bn: BatchNormConfig,
    use_bn: bool,
    vars: BTreeMap<String, Var>,
    updates: Vec<(String, Tensor)>,
}

impl Ctx<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        let tracked = self.track && p.kind == ParamKind::Trainable;
        let v = self.tape.leaf(p.tensor.clone(), tracked);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv_norm(&mut self, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.conv.weight"))?;
        if !self.use_bn {
            let b = self.param(&format!("{prefix}.conv.bias"))?;
            return self.tape.conv2d(x, w, Some(b), stride, padding);
        }
        let y = self.tape.conv2d(x, w, None, stride, padding)?;
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param(&format!("{prefix}.bn.beta"))?;
        let mean_name = format!("{prefix}.bn.running_mean");
        let var_name = format!("{prefix}.bn.running_var");
        let mut rm = self.params.tensor(&mean_name)?.clone();
        let mut rv = self.params.tensor(&var_name)?.clone();
        let out = self
            .tape
            .batchnorm2d(y, gamma, beta, &mut rm, &mut rv, self.mode, self.bn)?;
        if self.mode == Mode::Train {
            self.updates.push((mean_name, rm));
            self.updates.push((var_name, rv));
        }
        Ok(out)
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }
}

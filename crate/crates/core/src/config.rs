//! Run configuration: a flat key-value document with dotted section keys.
//! Unknown keys are rejected so configs cannot silently drift from the
//! schema. The effective document is echoed beside every output.

use crate::data::{Difficulty, GenConfig};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;
use crate::reg::RegMode;
use crate::train::{AugConfig, LrSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSizes {
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub reduction_channels: usize,
    pub stripes: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub conv_bias_init: f64,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes {
            channels: vec![8, 16, 32],
            kernel_size: 3,
            reduction_channels: 16,
            stripes: 2,
            clip_lo: 0.0,
            clip_hi: 6.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_bias_init: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCfg {
    pub smoothing_epsilon: f64,
    pub triplet_margin: f64,
}

impl Default for LossCfg {
    fn default() -> Self {
        LossCfg {
            smoothing_epsilon: 0.1,
            triplet_margin: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegCfg {
    pub mode: RegMode,
    pub amplitude: f64,
    pub half_width: f64,
    pub theta_init: f64,
    pub constant_lambda: f64,
    /// `None`: thetas follow the weight learning-rate schedule.
    pub theta_lr: Option<f64>,
}

impl Default for RegCfg {
    fn default() -> Self {
        RegCfg {
            mode: RegMode::Adaptive,
            amplitude: 0.0025,
            half_width: 2.5,
            theta_init: 0.0,
            constant_lambda: 0.0025,
            theta_lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCfg {
    pub iters: u64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
    pub milestones: Vec<u64>,
    pub lr_decay: f64,
    pub snapshot_every: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            iters: 2000,
            batch_p: 4,
            batch_k: 4,
            base_lr: 0.05,
            momentum: 0.9,
            warmup_iters: 200,
            warmup_start_factor: 0.1,
            milestones: vec![800, 1400],
            lr_decay: 0.1,
            snapshot_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCfg {
    pub protocol: Protocol,
    pub cmc_ranks: Vec<usize>,
    pub top_k: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            protocol: Protocol::SameCamSameId,
            cmc_ranks: vec![1, 5, 10],
            top_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub model: ModelSizes,
    pub loss: LossCfg,
    pub reg: RegCfg,
    pub train: TrainCfg,
    pub aug: AugConfig,
    pub eval: EvalCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: GenConfig::default(),
            model: ModelSizes::default(),
            loss: LossCfg::default(),
            reg: RegCfg::default(),
            train: TrainCfg::default(),
            aug: AugConfig::default(),
            eval: EvalCfg::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid("config value", format!("{} = {}", key, value)))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

fn join<T: std::fmt::Display>(vals: &[T]) -> String {
    vals.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses a flat `key = value` document. Blank lines and lines starting
    /// with `#` are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(
                    "config line",
                    format!("line {}: expected `key = value`, got `{}`", lineno + 1, line),
                )
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "data.num_train_ids" => self.data.num_train_ids = parse_num(key, value)?,
            "data.num_test_ids" => self.data.num_test_ids = parse_num(key, value)?,
            "data.cameras" => self.data.cameras = parse_num(key, value)?,
            "data.samples_per_id_per_camera" => {
                self.data.samples_per_id_per_camera = parse_num(key, value)?
            }
            "data.height" => self.data.height = parse_num(key, value)?,
            "data.width" => self.data.width = parse_num(key, value)?,
            "data.latent_dim" => self.data.latent_dim = parse_num(key, value)?,
            "data.camera_strength" => self.data.camera_strength = parse_num(key, value)?,
            "data.noise_level" => self.data.noise_level = parse_num(key, value)?,
            "data.difficulty" => self.data.difficulty = Difficulty::parse(value)?,
            "model.channels" => self.model.channels = parse_list(key, value)?,
            "model.kernel_size" => self.model.kernel_size = parse_num(key, value)?,
            "model.reduction_channels" => self.model.reduction_channels = parse_num(key, value)?,
            "model.stripes" => self.model.stripes = parse_num(key, value)?,
            "model.clip_lo" => self.model.clip_lo = parse_num(key, value)?,
            "model.clip_hi" => self.model.clip_hi = parse_num(key, value)?,
            "model.bn_momentum" => self.model.bn_momentum = parse_num(key, value)?,
            "model.bn_eps" => self.model.bn_eps = parse_num(key, value)?,
            "model.conv_bias_init" => self.model.conv_bias_init = parse_num(key, value)?,
            "loss.smoothing_epsilon" => self.loss.smoothing_epsilon = parse_num(key, value)?,
            "loss.triplet_margin" => self.loss.triplet_margin = parse_num(key, value)?,
            "reg.mode" => self.reg.mode = RegMode::parse(value)?,
            "reg.amplitude" => self.reg.amplitude = parse_num(key, value)?,
            "reg.half_width" => self.reg.half_width = parse_num(key, value)?,
            "reg.theta_init" => self.reg.theta_init = parse_num(key, value)?,
            "reg.constant_lambda" => self.reg.constant_lambda = parse_num(key, value)?,
            "reg.theta_lr" => {
                self.reg.theta_lr = if value == "same" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "train.iters" => self.train.iters = parse_num(key, value)?,
            "train.batch_p" => self.train.batch_p = parse_num(key, value)?,
            "train.batch_k" => self.train.batch_k = parse_num(key, value)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.warmup_iters" => self.train.warmup_iters = parse_num(key, value)?,
            "train.warmup_start_factor" => {
                self.train.warmup_start_factor = parse_num(key, value)?
            }
            "train.milestones" => self.train.milestones = parse_list(key, value)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, value)?,
            "train.snapshot_every" => self.train.snapshot_every = parse_num(key, value)?,
            "aug.flip_prob" => self.aug.flip_prob = parse_num(key, value)?,
            "aug.pad" => self.aug.pad = parse_num(key, value)?,
            "aug.erase_prob" => self.aug.erase_prob = parse_num(key, value)?,
            "aug.erase_area_lo" => self.aug.erase_area.0 = parse_num(key, value)?,
            "aug.erase_area_hi" => self.aug.erase_area.1 = parse_num(key, value)?,
            "aug.erase_aspect_lo" => self.aug.erase_aspect.0 = parse_num(key, value)?,
            "aug.erase_aspect_hi" => self.aug.erase_aspect.1 = parse_num(key, value)?,
            "eval.protocol" => self.eval.protocol = Protocol::parse(value)?,
            "eval.cmc_ranks" => self.eval.cmc_ranks = parse_list(key, value)?,
            "eval.top_k" => self.eval.top_k = parse_num(key, value)?,
            other => {
                return Err(Error::invalid(
                    "config key",
                    format!("unknown key `{}`", other),
                ))
            }
        }
        Ok(())
    }

    /// Canonical document with every key, suitable for echoing and for
    /// embedding in checkpoints. `parse(to_document(cfg)) == cfg`.
    pub fn to_document(&self) -> String {
        let theta_lr = match self.reg.theta_lr {
            Some(v) => v.to_string(),
            None => "same".to_string(),
        };
        format!(
            "seed = {}\n\
             data.num_train_ids = {}\n\
             data.num_test_ids = {}\n\
             data.cameras = {}\n\
             data.samples_per_id_per_camera = {}\n\
             data.height = {}\n\
             data.width = {}\n\
             data.latent_dim = {}\n\
             data.camera_strength = {}\n\
             data.noise_level = {}\n\
             data.difficulty = {}\n\
             model.channels = {}\n\
             model.kernel_size = {}\n\
             model.reduction_channels = {}\n\
             model.stripes = {}\n\
             model.clip_lo = {}\n\
             model.clip_hi = {}\n\
             model.bn_momentum = {}\n\
             model.bn_eps = {}\n\
             model.conv_bias_init = {}\n\
             loss.smoothing_epsilon = {}\n\
             loss.triplet_margin = {}\n\
             reg.mode = {}\n\
             reg.amplitude = {}\n\
             reg.half_width = {}\n\
             reg.theta_init = {}\n\
             reg.constant_lambda = {}\n\
             reg.theta_lr = {}\n\
             train.iters = {}\n\
             train.batch_p = {}\n\
             train.batch_k = {}\n\
             train.base_lr = {}\n\
             train.momentum = {}\n\
             train.warmup_iters = {}\n\
             train.warmup_start_factor = {}\n\
             train.milestones = {}\n\
             train.lr_decay = {}\n\
             train.snapshot_every = {}\n\
             aug.flip_prob = {}\n\
             aug.pad = {}\n\
             aug.erase_prob = {}\n\
             aug.erase_area_lo = {}\n\
             aug.erase_area_hi = {}\n\
             aug.erase_aspect_lo = {}\n\
             aug.erase_aspect_hi = {}\n\
             eval.protocol = {}\n\
             eval.cmc_ranks = {}\n\
             eval.top_k = {}\n",
            self.seed,
            self.data.num_train_ids,
            self.data.num_test_ids,
            self.data.cameras,
            self.data.samples_per_id_per_camera,
            self.data.height,
            self.data.width,
            self.data.latent_dim,
            self.data.camera_strength,
            self.data.noise_level,
            self.data.difficulty.as_str(),
            join(&self.model.channels),
            self.model.kernel_size,
            self.model.reduction_channels,
            self.model.stripes,
            self.model.clip_lo,
            self.model.clip_hi,
            self.model.bn_momentum,
            self.model.bn_eps,
            self.model.conv_bias_init,
            self.loss.smoothing_epsilon,
            self.loss.triplet_margin,
            self.reg.mode,
            self.reg.amplitude,
            self.reg.half_width,
            self.reg.theta_init,
            self.reg.constant_lambda,
            theta_lr,
            self.train.iters,
            self.train.batch_p,
            self.train.batch_k,
            self.train.base_lr,
            self.train.momentum,
            self.train.warmup_iters,
            self.train.warmup_start_factor,
            join(&self.train.milestones),
            self.train.lr_decay,
            self.train.snapshot_every,
            self.aug.flip_prob,
            self.aug.pad,
            self.aug.erase_prob,
            self.aug.erase_area.0,
            self.aug.erase_area.1,
            self.aug.erase_aspect.0,
            self.aug.erase_aspect.1,
            self.eval.protocol,
            join(&self.eval.cmc_ranks),
            self.eval.top_k,
        )
    }

    /// Model topology fields (num_classes and input size are filled from
    /// the dataset at build time).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_h: self.data.height,
            input_w: self.data.width,
            channels: self.model.channels.clone(),
            kernel_size: self.model.kernel_size,
            reduction_channels: self.model.reduction_channels,
            stripes: self.model.stripes,
            clip_lo: self.model.clip_lo,
            clip_hi: self.model.clip_hi,
            bn_momentum: self.model.bn_momentum,
            bn_eps: self.model.bn_eps,
            conv_bias_init: self.model.conv_bias_init,
            num_classes: 1,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.train.base_lr,
            warmup_iters: self.train.warmup_iters,
            warmup_start_factor: self.train.warmup_start_factor,
            milestones: self.train.milestones.clone(),
            decay: self.train.lr_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.aug.validate()?;
        self.lr_schedule().validate()?;
        if self.train.snapshot_every == 0 {
            return Err(Error::invalid("train config", "snapshot_every must be >= 1"));
        }
        if self.train.iters == 0 {
            return Err(Error::invalid("train config", "iters must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::invalid("train config", "momentum must be in [0, 1)"));
        }
        if self.reg.amplitude <= 0.0 {
            return Err(Error::invalid("reg config", "amplitude must be positive"));
        }
        if self.reg.half_width <= 0.0 {
            return Err(Error::invalid("reg config", "half_width must be positive"));
        }
        if self.reg.constant_lambda < 0.0 {
            return Err(Error::invalid("reg config", "constant_lambda must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.loss.smoothing_epsilon) {
            return Err(Error::invalid("loss config", "smoothing_epsilon must be in [0, 1)"));
        }
        if self.loss.triplet_margin < 0.0 {
            return Err(Error::invalid("loss config", "triplet_margin must be >= 0"));
        }
        Ok(())
    }
}

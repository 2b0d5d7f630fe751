//! Flat `key = value` configuration shared by data generation and training.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. `seed`
//! applies to both the benchmark and the trainer.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::synthgen::BenchmarkConfig;
use crate::trainer::{LambdaScope, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub train: TrainConfig,
    pub bench: BenchmarkConfig,
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { line, key: key.into(), value: value.into() })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: idx + 1 })?;
            cfg.set(idx + 1, key.trim(), value.trim())?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Apply one setting; `line` is used for error reporting.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let b = &mut self.bench;
        macro_rules! p {
            () => {
                parse(line, key, value)?
            };
        }
        match key {
            "seed" => {
                t.seed = p!();
                b.seed = t.seed;
            }
            "lr_base" => t.lr_base = p!(),
            "lr_final_ratio" => t.lr_final_ratio = p!(),
            "warmup_epochs" => t.warmup_epochs = p!(),
            "momentum" => t.momentum = p!(),
            "nesterov" => t.nesterov = p!(),
            "weight_decay" => t.weight_decay = p!(),
            "epochs" => t.epochs = p!(),
            "batch_size" => t.batch_size = p!(),
            "ema_alpha" => t.ema_alpha = p!(),
            "conf_threshold" => t.conf_threshold = p!(),
            "expand_factor" => t.expand_factor = p!(),
            "discard_threshold" => t.discard_threshold = p!(),
            "downscale_area_ratio" => t.downscale_area_ratio = p!(),
            "class_cap" => t.class_cap = p!(),
            "enable_mix" => t.enable_mix = p!(),
            "enable_pseudo" => t.enable_pseudo = p!(),
            "enable_resize" => t.enable_resize = p!(),
            "lambda_scope" => t.lambda_scope = p!(),
            "hidden_dim" => t.hidden_dim = p!(),
            "pool_grid" => t.pool_grid = p!(),
            "target_box_jitter" => t.target_box_jitter = p!(),
            "iou_threshold" => t.iou_threshold = p!(),

            "num_classes" => b.num_classes = p!(),
            "clips_per_domain" => b.clips_per_domain = p!(),
            "val_clips" => b.val_clips = p!(),
            "frames" => b.frames = p!(),
            "height" => b.height = p!(),
            "width" => b.width = p!(),
            "channels" => b.channels = p!(),
            "instances_min" => b.instances_min = p!(),
            "instances_max" => b.instances_max = p!(),
            "box_min" => b.box_min = p!(),
            "box_max" => b.box_max = p!(),
            "closeup_fraction" => b.closeup_fraction = p!(),
            "closeup_min" => b.closeup_min = p!(),
            "closeup_max" => b.closeup_max = p!(),
            "max_overlap" => b.max_overlap = p!(),
            "speed" => b.speed = p!(),
            "source_background" => b.source.background_mean = p!(),
            "source_contrast" => b.source.contrast = p!(),
            "source_noise" => b.source.noise_sigma = p!(),
            "shift_background_delta" => b.shift.background_delta = p!(),
            "shift_contrast_scale" => b.shift.contrast_scale = p!(),
            "shift_noise_sigma" => b.shift.noise_sigma = p!(),
            "long_tail_gamma" => b.long_tail_gamma = p!(),
            _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
        }
        Ok(())
    }

    /// Render every setting; parsing the output reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let b = &self.bench;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", t.seed.to_string());
        kv("lr_base", t.lr_base.to_string());
        kv("lr_final_ratio", t.lr_final_ratio.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("momentum", t.momentum.to_string());
        kv("nesterov", t.nesterov.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("ema_alpha", t.ema_alpha.to_string());
        kv("conf_threshold", t.conf_threshold.to_string());
        kv("expand_factor", t.expand_factor.to_string());
        kv("discard_threshold", t.discard_threshold.to_string());
        kv("downscale_area_ratio", t.downscale_area_ratio.to_string());
        kv("class_cap", t.class_cap.to_string());
        kv("enable_mix", t.enable_mix.to_string());
        kv("enable_pseudo", t.enable_pseudo.to_string());
        kv("enable_resize", t.enable_resize.to_string());
        kv("lambda_scope", t.lambda_scope.to_string());
        kv("hidden_dim", t.hidden_dim.to_string());
        kv("pool_grid", t.pool_grid.to_string());
        kv("target_box_jitter", t.target_box_jitter.to_string());
        kv("iou_threshold", t.iou_threshold.to_string());
        kv("num_classes", b.num_classes.to_string());
        kv("clips_per_domain", b.clips_per_domain.to_string());
        kv("val_clips", b.val_clips.to_string());
        kv("frames", b.frames.to_string());
        kv("height", b.height.to_string());
        kv("width", b.width.to_string());
        kv("channels", b.channels.to_string());
        kv("instances_min", b.instances_min.to_string());
        kv("instances_max", b.instances_max.to_string());
        kv("box_min", b.box_min.to_string());
        kv("box_max", b.box_max.to_string());
        kv("closeup_fraction", b.closeup_fraction.to_string());
        kv("closeup_min", b.closeup_min.to_string());
        kv("closeup_max", b.closeup_max.to_string());
        kv("max_overlap", b.max_overlap.to_string());
        kv("speed", b.speed.to_string());
        kv("source_background", b.source.background_mean.to_string());
        kv("source_contrast", b.source.contrast.to_string());
        kv("source_noise", b.source.noise_sigma.to_string());
        kv("shift_background_delta", b.shift.background_delta.to_string());
        kv("shift_contrast_scale", b.shift.contrast_scale.to_string());
        kv("shift_noise_sigma", b.shift.noise_sigma.to_string());
        kv("long_tail_gamma", b.long_tail_gamma.to_string());
        s
    }
}

impl FromStr for LambdaScope {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "clip" => Ok(LambdaScope::Clip),
            "batch" => Ok(LambdaScope::Batch),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for LambdaScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LambdaScope::Clip => "clip",
            LambdaScope::Batch => "batch",
        })
    }
}

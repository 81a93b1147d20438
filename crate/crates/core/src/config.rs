//! Flat `key=value` run configuration.
//!
//! Every field maps to one config-file key and one CLI flag (the key with
//! underscores replaced by hyphens). Unknown keys are rejected; printing a
//! parsed config reproduces it exactly (`parse` of `print` is the
//! identity).

use crate::error::{Error, Result};
use crate::eval::EdgeConfig;
use crate::mixture::LossConfig;
use crate::net::NetConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

/// All tunable parameters of a run with their documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Scene generation.
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub noise_std: f64,
    pub edge_floor: f64,
    pub count: usize,

    // Network.
    pub input_channels: usize,
    pub feature_channels: usize,
    pub experts: usize,
    pub kernel_size: usize,
    pub encoder_layers: usize,

    // Loss.
    pub sigma: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,

    // Trainer.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_start: f64,
    pub tau_decay: f64,
    pub tau_floor: f64,
    pub freeze_encoder: bool,

    // Evaluation.
    pub edge_threshold: f64,
    pub sobel_scale: bool,
    pub median_scale: bool,
    pub fly_k: usize,
    pub fly_ratio: f64,
    /// Percentile of lowest-confidence pixels masked during evaluation.
    pub confidence_mask: f64,

    // Ablation grid.
    pub lambdas: Vec<f64>,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            objects_min: 1,
            objects_max: 5,
            depth_near: 1.0,
            depth_far: 10.0,
            noise_std: 0.05,
            edge_floor: 0.25,
            count: 32,
            input_channels: 3,
            feature_channels: 16,
            experts: 4,
            kernel_size: 3,
            encoder_layers: 2,
            sigma: 1.0,
            lambda_d: 1.0,
            lambda_e: 1e-4,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.05,
            tau_start: 1.0,
            tau_decay: 0.995,
            tau_floor: 0.1,
            freeze_encoder: false,
            edge_threshold: 50.0,
            sobel_scale: true,
            median_scale: true,
            fly_k: 8,
            fly_ratio: 3.0,
            confidence_mask: 1.0,
            lambdas: vec![1e-2, 1e-3, 1e-4, 0.0],
            seed: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            /// Canonical key order used by [`RunConfig::to_text`].
            pub const KEYS: &'static [&'static str] = &[$($key),+];

            /// Sets one key from its text form; unknown keys and unparsable
            /// values are config errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => config_keys!(@parse self, $field, $kind, key, value)),+,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            fn value_text(&self, key: &str) -> String {
                match key {
                    $($key => config_keys!(@print self, $field, $kind)),+,
                    _ => unreachable!("keys come from KEYS"),
                }
            }
        }
    };
    (@parse $self:ident, $field:ident, usize, $key:ident, $value:ident) => {
        $self.$field = $value.parse::<usize>().map_err(|_| bad($key, $value))?
    };
    (@parse $self:ident, $field:ident, u64, $key:ident, $value:ident) => {
        $self.$field = $value.parse::<u64>().map_err(|_| bad($key, $value))?
    };
    (@parse $self:ident, $field:ident, f64, $key:ident, $value:ident) => {
        $self.$field = $value.parse::<f64>().map_err(|_| bad($key, $value))?
    };
    (@parse $self:ident, $field:ident, bool, $key:ident, $value:ident) => {
        $self.$field = $value.parse::<bool>().map_err(|_| bad($key, $value))?
    };
    (@parse $self:ident, $field:ident, f64list, $key:ident, $value:ident) => {
        $self.$field = $value
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad($key, $value)))
            .collect::<Result<Vec<f64>>>()?
    };
    (@print $self:ident, $field:ident, f64list) => {
        $self.$field.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    };
    (@print $self:ident, $field:ident, $kind:ident) => {
        $self.$field.to_string()
    };
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("bad value `{value}` for key `{key}`"))
}

config_keys! {
    "height" => height: usize,
    "width" => width: usize,
    "objects_min" => objects_min: usize,
    "objects_max" => objects_max: usize,
    "depth_near" => depth_near: f64,
    "depth_far" => depth_far: f64,
    "noise_std" => noise_std: f64,
    "edge_floor" => edge_floor: f64,
    "count" => count: usize,
    "input_channels" => input_channels: usize,
    "feature_channels" => feature_channels: usize,
    "experts" => experts: usize,
    "kernel_size" => kernel_size: usize,
    "encoder_layers" => encoder_layers: usize,
    "sigma" => sigma: f64,
    "lambda_d" => lambda_d: f64,
    "lambda_e" => lambda_e: f64,
    "steps" => steps: usize,
    "lr" => lr: f64,
    "weight_decay" => weight_decay: f64,
    "tau_start" => tau_start: f64,
    "tau_decay" => tau_decay: f64,
    "tau_floor" => tau_floor: f64,
    "freeze_encoder" => freeze_encoder: bool,
    "edge_threshold" => edge_threshold: f64,
    "sobel_scale" => sobel_scale: bool,
    "median_scale" => median_scale: bool,
    "fly_k" => fly_k: usize,
    "fly_ratio" => fly_ratio: f64,
    "confidence_mask" => confidence_mask: f64,
    "lambdas" => lambdas: f64list,
    "seed" => seed: u64,
}

impl RunConfig {
    /// Serializes as one `key=value` line per key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.value_text(key));
            out.push('\n');
        }
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            objects_min: self.objects_min,
            objects_max: self.objects_max,
            depth_near: self.depth_near,
            depth_far: self.depth_far,
            noise_std: self.noise_std,
            edge_floor: self.edge_floor,
            seed: self.seed,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            input_channels: self.input_channels,
            feature_channels: self.feature_channels,
            num_experts: self.experts,
            kernel_size: self.kernel_size,
            encoder_layers: self.encoder_layers,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            sigma: self.sigma,
            lambda_d: self.lambda_d,
            lambda_e: self.lambda_e,
            valid_mask: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            net: self.net_config(),
            loss: self.loss_config(),
            steps: self.steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            tau_start: self.tau_start,
            tau_decay: self.tau_decay,
            tau_floor: self.tau_floor,
            freeze_encoder: self.freeze_encoder,
            seed: self.seed,
        }
    }

    pub fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            threshold: self.edge_threshold,
            scale_to_255: self.sobel_scale,
        }
    }
}

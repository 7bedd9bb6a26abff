//! Run configuration: one JSON document holding every hyperparameter.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DataKind;
use crate::error::{PsrnnError, Result};
use crate::model::FactorizeOptions;
use crate::train::TrainConfig;
use crate::twostage::{InitConfig, StageOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Fraction of a character corpus (by bytes) or of trajectory files used
    /// for training.
    pub train_fraction: f64,
    /// Overrides `train_fraction` for trajectory files: the first `n` train.
    pub train_files: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_fraction: 0.9,
            train_files: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub past: usize,
    /// `null` picks 1 for discrete data and 10 for continuous data.
    pub future: Option<usize>,
    pub future_constant: Option<f64>,
    pub rff_count: usize,
    pub obs_dim: usize,
    pub history_dim: usize,
    pub states: usize,
    pub max_fit_samples: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let d = InitConfig::default();
        FeatureConfig {
            past: d.past,
            future: None,
            future_constant: d.future_constant,
            rff_count: d.rff_count,
            obs_dim: d.obs_dim,
            history_dim: d.history_dim,
            states: d.states,
            max_fit_samples: d.max_fit_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    /// Stage ridge `λ = ridge_scale · n`.
    pub ridge_scale: f64,
    pub rcond: f64,
    pub pure_pinv: bool,
    pub decoder_ridge: f64,
    pub preactivation_scale: Option<f64>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        let d = InitConfig::default();
        RegressionConfig {
            ridge_scale: d.stage.ridge_scale,
            rcond: d.stage.rcond,
            pure_pinv: d.stage.pure_pinv,
            decoder_ridge: d.decoder_ridge,
            preactivation_scale: d.preactivation_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub random_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 1,
            random_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorizeConfig {
    pub ranks: Vec<usize>,
    pub bias_scale: Option<f64>,
    pub als_ridge: f64,
    pub max_iters: usize,
}

impl Default for FactorizeConfig {
    fn default() -> Self {
        let d = FactorizeOptions::default();
        FactorizeConfig {
            ranks: vec![d.rank],
            bias_scale: d.bias_scale,
            als_ridge: d.als_ridge,
            max_iters: d.max_iters,
        }
    }
}

/// BPTT truncation: a step count, `"full"` or `"auto"` (35 for discrete
/// data, full sequences for continuous data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bptt {
    Steps(usize),
    Named(BpttName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BpttName {
    Auto,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub bptt_horizon: Bptt,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub train_q1: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            bptt_horizon: Bptt::Named(BpttName::Auto),
            epochs: d.epochs,
            batch_size: d.batch_size,
            grad_clip: d.grad_clip,
            train_q1: d.train_q1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub states: usize,
    pub symbols: usize,
    pub length: usize,
    pub test_length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            states: 3,
            symbols: 4,
            length: 100_000,
            test_length: 20_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub regression: RegressionConfig,
    pub model: ModelConfig,
    pub factorize: FactorizeConfig,
    pub train: TrainSection,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses and validates; unknown keys are errors.
    pub fn from_json(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| PsrnnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PsrnnError::Config(m));
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return bad(format!(
                "data.train_fraction must be in (0, 1], got {}",
                self.data.train_fraction
            ));
        }
        if self.factorize.ranks.contains(&0) {
            return bad("factorize.ranks must be positive".into());
        }
        if self.synth.states == 0 || self.synth.symbols == 0 || self.synth.length < 2 {
            return bad("synth needs states, symbols and length ≥ 2".into());
        }
        let to_cfg = |e: PsrnnError| PsrnnError::Config(e.to_string());
        for kind in [DataKind::Discrete { alphabet: 2 }, DataKind::Continuous { dim: 1 }] {
            self.init_config(&kind).validate().map_err(to_cfg)?;
            self.train_config(&kind).validate().map_err(to_cfg)?;
        }
        Ok(())
    }

    pub fn init_config(&self, kind: &DataKind) -> InitConfig {
        let f = &self.features;
        let discrete = matches!(kind, DataKind::Discrete { .. });
        InitConfig {
            past: f.past,
            future: f.future.unwrap_or(if discrete { 1 } else { 10 }),
            future_constant: f.future_constant,
            stage: StageOptions {
                ridge_scale: self.regression.ridge_scale,
                rcond: self.regression.rcond,
                pure_pinv: self.regression.pure_pinv,
            },
            decoder_ridge: self.regression.decoder_ridge,
            rff_count: f.rff_count,
            obs_dim: f.obs_dim,
            history_dim: f.history_dim,
            states: f.states,
            max_fit_samples: f.max_fit_samples,
            layers: self.model.layers,
            preactivation_scale: self.regression.preactivation_scale,
            seed: self.seed,
        }
    }

    pub fn train_config(&self, kind: &DataKind) -> TrainConfig {
        let t = &self.train;
        let discrete = matches!(kind, DataKind::Discrete { .. });
        TrainConfig {
            learning_rate: t.learning_rate,
            bptt_horizon: match t.bptt_horizon {
                Bptt::Steps(n) => Some(n),
                Bptt::Named(BpttName::Full) => None,
                Bptt::Named(BpttName::Auto) => discrete.then_some(35),
            },
            epochs: t.epochs,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            train_q1: t.train_q1,
            seed: self.seed,
        }
    }

    pub fn factorize_options(&self, rank: usize) -> FactorizeOptions {
        FactorizeOptions {
            rank,
            bias_scale: self.factorize.bias_scale,
            als_ridge: self.factorize.als_ridge,
            max_iters: self.factorize.max_iters,
            seed: self.seed,
        }
    }
}

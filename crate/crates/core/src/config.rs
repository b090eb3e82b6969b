//! Experiment configuration files (JSON).
//!
//! Unknown keys are rejected. Errors carry the 1-based line of the offending
//! field so that typos are easy to find.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{ThresholdGrid, ValidationSet, DEFAULT_BUDGET};
use crate::error::{invalid_param, DsdError, Result};
use crate::latency::ClusterConfig;
use crate::netsim::LatencySampler;
use crate::token_model::{Context, TokenModel};
use crate::verifier::{KeyCriteria, VerifyParams};

/// Built-in configuration: a divergent 8-token Markov pair at gamma = 8,
/// tau = 0.2, three seeds, with a tau sweep and a calibration set.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplerConfig {
    Deterministic {},
    UniformJitter { jitter_halfwidth_ms: f64 },
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::Deterministic {}
    }
}

impl SamplerConfig {
    /// The link sampler, centred on `t1_ms`.
    pub fn sampler(&self, t1_ms: f64) -> LatencySampler {
        match *self {
            SamplerConfig::Deterministic {} => LatencySampler::deterministic(t1_ms),
            SamplerConfig::UniformJitter {
                jitter_halfwidth_ms,
            } => LatencySampler::uniform_jitter(t1_ms, jitter_halfwidth_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Tau,
    NNodes,
    T1,
    Gamma,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Tau => "tau",
            SweepParameter::NNodes => "n_nodes",
            SweepParameter::T1 => "t1",
            SweepParameter::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Draft window used during calibration; must respect the enumeration guard.
    #[serde(default = "default_calibration_gamma")]
    pub gamma: usize,
    pub items: ValidationSet,
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default)]
    pub grid: ThresholdGrid,
}

fn default_budget() -> f64 {
    DEFAULT_BUDGET
}

fn default_calibration_gamma() -> usize {
    3
}

fn default_horizon() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub draft: TokenModel,
    pub target: TokenModel,
    #[serde(default)]
    pub prompt: Context,
    pub gamma: usize,
    pub tau: f64,
    #[serde(default)]
    pub criteria: KeyCriteria,
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub max_new: usize,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Tokens compared by `verify-lossless`.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationConfig>,
}

impl ExperimentConfig {
    pub fn verify_params(&self) -> VerifyParams {
        VerifyParams {
            gamma: self.gamma,
            tau: self.tau,
            criteria: self.criteria,
        }
    }

    pub fn latency_sampler(&self) -> LatencySampler {
        self.sampler.sampler(self.cluster.t1_ms)
    }

    pub fn validate(&self) -> Result<()> {
        self.verify_params().validate()?;
        self.cluster.validate()?;
        self.latency_sampler().validate()?;
        let v = self.target.vocab_size();
        if self.draft.vocab_size() != v {
            return Err(invalid_param(
                "draft.vocab_size",
                format!(
                    "draft vocabulary {} differs from target vocabulary {v}",
                    self.draft.vocab_size()
                ),
            ));
        }
        if let Err(e) = self.prompt.validate(v) {
            return Err(invalid_param("prompt", e.to_string()));
        }
        if self.max_new == 0 {
            return Err(invalid_param("max_new", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid_param("seeds", "at least one seed is required"));
        }
        if self.horizon == 0 {
            return Err(invalid_param("horizon", "must be >= 1"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(invalid_param("sweep.values", "must be nonempty"));
            }
            for &x in &sweep.values {
                self.with_sweep_value(sweep.parameter, x)
                    .and_then(|c| {
                        c.verify_params().validate()?;
                        c.cluster.validate()
                    })
                    .map_err(|e| invalid_param("sweep.values", e.to_string()))?;
            }
        }
        if let Some(cal) = &self.calibration {
            if !(cal.budget > 0.0 && cal.budget < 1.0) {
                return Err(invalid_param(
                    "calibration.budget",
                    format!("{} not in (0, 1)", cal.budget),
                ));
            }
            if cal.gamma == 0 || cal.gamma > crate::enumerate::MAX_GAMMA {
                return Err(invalid_param(
                    "calibration.gamma",
                    format!("{} not in [1, {}]", cal.gamma, crate::enumerate::MAX_GAMMA),
                ));
            }
            if cal.items.items.is_empty() {
                return Err(invalid_param("calibration.items", "must be nonempty"));
            }
            cal.grid
                .validate()
                .map_err(|e| invalid_param("calibration.grid", e.to_string()))?;
        }
        Ok(())
    }

    /// Copy of this config with one parameter replaced.
    pub fn with_sweep_value(&self, parameter: SweepParameter, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let as_count = |field: &str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value.is_finite() {
                Ok(value as usize)
            } else {
                Err(invalid_param(
                    field,
                    format!("{value} is not a positive integer"),
                ))
            }
        };
        match parameter {
            SweepParameter::Tau => c.tau = value,
            SweepParameter::NNodes => c.cluster.n_nodes = as_count("n_nodes")?,
            SweepParameter::T1 => c.cluster.t1_ms = value,
            SweepParameter::Gamma => c.gamma = as_count("gamma")?,
        }
        Ok(c)
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| DsdError::Config {
        line: e.line().max(1),
        message: e.to_string(),
    })?;
    cfg.validate().map_err(|e| match e {
        DsdError::InvalidParameter { ref field, .. } => DsdError::Config {
            line: field_line(text, field),
            message: e.to_string(),
        },
        other => DsdError::Config {
            line: 1,
            message: other.to_string(),
        },
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DsdError::Config {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text)
}

pub fn default_config() -> ExperimentConfig {
    parse_config(DEFAULT_CONFIG).expect("built-in config is valid")
}

/// 1-based line of a dotted field path such as `criteria.lambda2`, found by
/// locating each key in turn. Falls back to the deepest key found, or 1.
pub fn field_line(text: &str, path: &str) -> usize {
    let mut pos = 0;
    for key in path.split('.') {
        let needle = format!("\"{key}\"");
        let mut search = pos;
        let mut found = None;
        while let Some(off) = text[search..].find(&needle) {
            let at = search + off;
            let rest = text[at + needle.len()..].trim_start();
            if rest.starts_with(':') {
                found = Some(at);
                break;
            }
            search = at + needle.len();
        }
        match found {
            Some(at) => pos = at,
            None => break,
        }
    }
    text[..pos].matches('\n').count() + 1
}

//! Run configuration: a TOML file with full defaults, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use apa_core::backbone::UNetConfig;
use apa_core::diffusion::{SamplerMode, DEFAULT_LAMBDA, SAMPLE_STEPS};
use apa_core::synthdata::FORMAT_VERSION;
use apa_core::training::{TrainConfig, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "APA_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: UNetConfig,
    pub base: StageConfig,
    pub adapter: StageConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub steps: usize,
    pub sampler: SamplerMode,
    /// Per-task defaults apply when unset.
    pub omega: Option<usize>,
    pub alpha: Option<f32>,
    pub lambda: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub requests: usize,
    pub request_seed: u64,
    /// Unconditional samples for the generative Fréchet distance; 0 skips it.
    pub unconditional_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub requests: usize,
    pub request_seed: u64,
    pub omega: usize,
    pub alpha: f32,
    pub lambda: f32,
    pub omega_values: Vec<usize>,
    pub alpha_values: Vec<f32>,
    pub lambda_values: Vec<f32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            model: UNetConfig::default(),
            base: StageConfig::from_train(&TrainConfig::base()),
            adapter: StageConfig::from_train(&TrainConfig::adapter()),
            edit: EditConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { clips: 2048 }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::base())
    }
}

impl Default for EditConfig {
    fn default() -> Self {
        Self { steps: SAMPLE_STEPS, sampler: SamplerMode::Deterministic, omega: None, alpha: None, lambda: None }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { requests: 32, request_seed: 1_000_003, unconditional_samples: 256 }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            requests: 32,
            request_seed: 2_000_003,
            omega: 2,
            alpha: 0.55,
            lambda: DEFAULT_LAMBDA,
            omega_values: vec![1, 2, 4, 8],
            alpha_values: vec![0.2, 0.4, 0.6, 0.8],
            lambda_values: vec![3.5, 5.0, 7.5, 10.0],
        }
    }
}

impl StageConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            dropout: t.dropout,
            log_every: t.log_every,
        }
    }

    /// Combines with the stage template, the run seed and the model's schedule length.
    pub fn to_train(&self, template: TrainConfig, seed: u64, model: &UNetConfig) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            log_every: self.log_every,
            seed,
            t_train: model.timesteps,
            ..template
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or the file named by `APA_CONFIG`, or falls back to defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let path = path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn base_train(&self) -> TrainConfig {
        self.base.to_train(TrainConfig::base(), self.seed, &self.model)
    }

    pub fn adapter_train(&self) -> TrainConfig {
        self.adapter.to_train(TrainConfig::adapter(), self.seed, &self.model)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.base_train().validate()?;
        self.adapter_train().validate()?;
        anyhow::ensure!(self.data.clips > 0, "data.clips must be positive");
        anyhow::ensure!(self.sweep.requests > 0 && self.eval.requests > 0, "request counts must be positive");
        Ok(())
    }
}

/// What every artifact-producing command records next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub dataset_format_version: u32,
    pub checkpoint_format_version: u32,
    pub config: &'a RunConfig,
}

/// Writes `<output>.run.toml` and returns its path.
pub fn write_run_record(output: &Path, command: &str, config: &RunConfig) -> Result<PathBuf> {
    let record = RunRecord {
        command,
        seed: config.seed,
        dataset_format_version: FORMAT_VERSION,
        checkpoint_format_version: CHECKPOINT_VERSION,
        config,
    };
    let mut path = output.as_os_str().to_owned();
    path.push(".run.toml");
    let path = PathBuf::from(path);
    std::fs::write(&path, toml::to_string(&record)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stages_are_the_library_stages() {
        let c = RunConfig::default();
        assert_eq!(c.base_train(), TrainConfig { seed: c.seed, ..TrainConfig::base() });
        assert_eq!(c.adapter_train(), TrainConfig { seed: c.seed, ..TrainConfig::adapter() });
    }

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[sweep]\nomgea = 2").is_err());
        let c = RunConfig::from_toml("seed = 3\n[base]\nsteps = 10").unwrap();
        assert_eq!(c.base_train().steps, 10);
        assert_eq!(c.base_train().seed, 3);
        assert_eq!(c.adapter_train().steps, 5000);
        c.validate().unwrap();
    }
}

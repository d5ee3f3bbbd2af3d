//! JSON run configuration shared by the command-line subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MoirError, Result};
use crate::experiments::{substream, DecoderSizing, TrainConfig};
use crate::informativeness::validate_k_prime;
use crate::io::read_bytes;
use crate::synth::SyntheticTaskSpec;

/// Task shape without a seed; the dataset seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub len_a: usize,
    pub len_b: usize,
    pub dims: usize,
    pub informative_dims_a: usize,
    pub informative_dims_b: usize,
    pub snr_a: f64,
    pub snr_b: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub dependent_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = SyntheticTaskSpec::default();
        Self {
            classes: s.classes,
            len_a: s.len_a,
            len_b: s.len_b,
            dims: s.dims,
            informative_dims_a: s.informative_dims_a,
            informative_dims_b: s.informative_dims_b,
            snr_a: s.snr_a,
            snr_b: s.snr_b,
            n_train: s.n_train,
            n_test: s.n_test,
            dependent_fraction: s.dependent_fraction,
        }
    }
}

fn default_kprimes() -> Vec<f64> {
    vec![0.05, 0.10, 0.15]
}

/// Everything one run needs. `seed` and `task` are required; the other
/// sections fall back to their defaults. The run seed overrides any
/// `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decoder: DecoderSizing,
    #[serde(default = "default_kprimes")]
    pub ablation_kprimes: Vec<f64>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn new(seed: u64, task: TaskConfig) -> Self {
        Self {
            seed,
            task,
            train: TrainConfig::default(),
            decoder: DecoderSizing::default(),
            ablation_kprimes: default_kprimes(),
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| MoirError::config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| MoirError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(text)
    }

    /// Re-derives seed-dependent fields after the seed was changed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.train.validate()?;
        if self.decoder.heads == 0 {
            return Err(MoirError::config("decoder.heads must be at least 1"));
        }
        let dk = self.decoder.key_dims.unwrap_or(self.task.dims);
        if dk == 0 || !dk.is_multiple_of(self.decoder.heads) {
            return Err(MoirError::config(format!(
                "key width {dk} is not a positive multiple of {} heads",
                self.decoder.heads
            )));
        }
        if self.ablation_kprimes.is_empty() {
            return Err(MoirError::config("ablation_kprimes must not be empty"));
        }
        for &k in &self.ablation_kprimes {
            validate_k_prime(k)?;
        }
        Ok(())
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        let t = &self.task;
        SyntheticTaskSpec {
            classes: t.classes,
            len_a: t.len_a,
            len_b: t.len_b,
            dims: t.dims,
            informative_dims_a: t.informative_dims_a,
            informative_dims_b: t.informative_dims_b,
            snr_a: t.snr_a,
            snr_b: t.snr_b,
            n_train: t.n_train,
            n_test: t.n_test,
            dependent_fraction: t.dependent_fraction,
            seed: substream(self.seed, "dataset"),
        }
    }

    pub fn robustness_seed(&self) -> u64 {
        substream(self.seed, "degrade")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task_json() -> String {
        serde_json::to_string(&TaskConfig::default()).unwrap()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(&format!(r#"{{"seed": 7, "task": {}}}"#, task_json())).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.ablation_kprimes, vec![0.05, 0.10, 0.15]);
        assert_eq!(cfg.task_spec().seed, substream(7, "dataset"));
    }

    #[test]
    fn missing_and_unknown_keys_are_schema_errors() {
        let missing = RunConfig::from_json(r#"{"seed": 1}"#);
        assert!(matches!(missing, Err(MoirError::InvalidConfig(_))));
        let unknown = RunConfig::from_json(&format!(r#"{{"seed": 1, "task": {}, "extra": 0}}"#, task_json()));
        assert!(matches!(unknown, Err(MoirError::InvalidConfig(_))));
        let nested = RunConfig::from_json(&format!(
            r#"{{"seed": 1, "task": {}, "train": {{"epochz": 3}}}}"#,
            task_json()
        ));
        assert!(matches!(nested, Err(MoirError::InvalidConfig(_))));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let bad_k = RunConfig::from_json(&format!(
            r#"{{"seed": 1, "task": {}, "train": {{"k_prime": 0.0}}}}"#,
            task_json()
        ));
        assert!(matches!(bad_k, Err(MoirError::InvalidConfig(_))));
        let bad_heads = RunConfig::from_json(&format!(
            r#"{{"seed": 1, "task": {}, "decoder": {{"heads": 5}}}}"#,
            task_json()
        ));
        assert!(matches!(bad_heads, Err(MoirError::InvalidConfig(_))));
    }
}

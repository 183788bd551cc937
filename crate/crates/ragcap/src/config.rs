//! The declarative pipeline configuration.

use std::collections::BTreeMap;
use std::path::Path;

use ragcap_core::experiment::ExperimentConfig;
use ragcap_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScstConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self { steps: 0, batch_size: 8, lr: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Number of synthetic scenes.
    pub scenes: usize,
    /// Seed of the synthetic world.
    pub seed: u64,
    pub synth: SynthConfig,
    /// Alias lexicon applied while building the description database.
    pub aliases: BTreeMap<String, String>,
    /// Abort on the first malformed annotation line.
    pub strict: bool,
    pub experiment: ExperimentConfig,
    pub scst: ScstConfig,
    /// Train all four text/conditioning cells instead of text+cond only.
    pub ablation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenes: 2000,
            seed: 7,
            synth: SynthConfig::default(),
            aliases: BTreeMap::new(),
            strict: false,
            experiment: ExperimentConfig::default(),
            scst: ScstConfig::default(),
            ablation: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if self.scenes < 2 {
            return Err(Error::Config("scenes must be at least 2".into()));
        }
        if e.k == 0 || e.batch_size == 0 || !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(Error::Config("k and batch_size must be positive, train_fraction in (0, 1)".into()));
        }
        if e.embedder.dim < 2 {
            return Err(Error::Config("embedder.dim must be at least 2".into()));
        }
        if self.scst.steps > 0 && (self.scst.batch_size == 0 || self.scst.lr <= 0.0) {
            return Err(Error::Config("scst needs batch_size >= 1 and lr > 0".into()));
        }
        e.crops.validate()?;
        e.conditioning.validate()?;
        ragcap_core::captioner::CaptionerConfig { vocab_size: 64, ..e.captioner }.validate()?;
        Ok(())
    }

    /// Canonical JSON of the fully resolved configuration.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"scenes": 10}"#).is_ok());
        assert!(matches!(PipelineConfig::from_json(r#"{"scenes": 10, "sceens": 3}"#), Err(Error::Config(_))));
        assert!(PipelineConfig::from_json(r#"{"experiment": {"k": 3, "kk": 1}}"#).is_err());
    }

    #[test]
    fn defaults_follow_module_defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.experiment.k, 12);
        assert_eq!(c.experiment.crops.five_ratio, 0.6);
        assert_eq!(c.experiment.conditioning.dropout, 0.1);
        assert_eq!(c.experiment.adam.lr, 1e-3);
        let back = PipelineConfig::from_json(&c.resolved_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(PipelineConfig::from_json(r#"{"experiment": {"k": 0}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"experiment": {"crops": {"five_ratio": 1.5}}}"#).is_err());
    }
}

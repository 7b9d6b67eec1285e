//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use lightsaft_core::eval::SDR_EPS;
use lightsaft_core::model::{ModelConfig, SeparationConfig, Variant};
use lightsaft_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluation and throughput settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Largest passing real-time factor (wall / audio seconds).
    pub budget_rtf: f64,
    /// SDR regulariser.
    pub eps: f64,
    /// Synthetic audio length timed by the throughput check.
    pub throughput_seconds: f64,
    /// Rate of the synthetic throughput audio.
    pub sample_rate: u32,
    pub separation: SeparationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget_rtf: 1.0,
            eps: SDR_EPS,
            throughput_seconds: 10.0,
            sample_rate: 8000,
            separation: SeparationConfig::default(),
        }
    }
}

/// Default paths; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl CliConfig {
    /// Desk-scale defaults.
    pub fn desk(variant: Variant) -> Self {
        Self {
            model: ModelConfig::desk(variant),
            train: TrainConfig::desk(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }

    pub fn reference(variant: Variant) -> Self {
        Self {
            model: ModelConfig::reference(variant),
            ..Self::desk(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        // range check only; the rate does not affect validity
        self.eval.separation.frames(self.model.stft.hop, 1)?;
        if !(self.eval.eps > 0.0) || !(self.eval.throughput_seconds > 0.0) || self.eval.sample_rate == 0 || self.eval.budget_rtf.is_nan() || self.eval.budget_rtf < 0.0 {
            return Err(Error::Usage("eval: eps, throughput_seconds and sample_rate must be positive, budget_rtf >= 0".into()));
        }
        Ok(())
    }

    /// Parses and validates; syntax errors carry line and column.
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips() {
        let cfg = CliConfig::desk(Variant::LightsaftPlus);
        let back = CliConfig::from_json(&cfg.resolved_json(), Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_default() {
        let cfg = CliConfig::desk(Variant::Lightsaft);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v.as_object_mut().unwrap().remove("eval");
        v.as_object_mut().unwrap().remove("io");
        let back = CliConfig::from_json(&v.to_string(), Path::new("x.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected_with_position() {
        let cfg = CliConfig::desk(Variant::Lightsaft);
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["train"]["warmup"] = 3.into();
        let text = serde_json::to_string_pretty(&v).unwrap();
        match CliConfig::from_json(&text, Path::new("x.json")) {
            Err(e @ Error::Json { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("warmup") && msg.contains("line"), "{msg}");
                assert_eq!(e.exit_code(), crate::error::EXIT_USAGE);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = CliConfig::desk(Variant::Lightsaft);
        cfg.train.batch_size = 0;
        assert!(CliConfig::from_json(&cfg.resolved_json(), Path::new("x")).is_err());
        let mut cfg = CliConfig::desk(Variant::Lightsaft);
        cfg.model.num_scales = 9;
        assert_eq!(CliConfig::from_json(&cfg.resolved_json(), Path::new("x")).unwrap_err().exit_code(), 2);
    }
}

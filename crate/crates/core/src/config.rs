//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SampleSpec};
use crate::prune::{KeepPolicy, ScheduleFile};

/// Synthetic corpus shape. Sample `i` uses seed `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub samples: usize,
    pub vision_count: usize,
    pub text_count: usize,
    pub planted_fraction: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = SampleSpec::default();
        Self {
            samples: 8,
            vision_count: spec.vision_count,
            text_count: spec.text_count,
            planted_fraction: spec.planted_fraction,
            signal_strength: spec.signal_strength,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn sample_spec(&self, index: usize) -> SampleSpec {
        SampleSpec {
            vision_count: self.vision_count,
            text_count: self.text_count,
            planted_fraction: self.planted_fraction,
            signal_strength: self.signal_strength,
            seed: self.seed.wrapping_add(index as u64),
        }
    }

    pub fn sample_id(index: usize) -> String {
        format!("sample_{index:04}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Target layer-weighted average of retained vision tokens.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    /// Explicit schedule; mutually exclusive with `budget`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleFile>,
    pub stage_layers: Vec<usize>,
    pub policy: KeepPolicy,
    pub fraction_text: f64,
    pub fraction_vision: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            budget: Some(64.0),
            schedule: None,
            stage_layers: vec![1, 10, 20],
            policy: KeepPolicy::default(),
            fraction_text: 0.2,
            fraction_vision: 0.1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // a file that names a schedule and omits the budget should not inherit the default
        let mut cfg = cfg;
        if cfg.schedule.is_some() && !text_sets_budget(text) {
            cfg.budget = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match (&self.budget, &self.schedule) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set exactly one of `budget` and `schedule`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of `budget` or `schedule` is required".into(),
                ))
            }
            _ => {}
        }
        for f in [self.fraction_text, self.fraction_vision] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidFraction(f));
            }
        }
        Ok(())
    }
}

fn text_sets_budget(text: &str) -> bool {
    toml::from_str::<toml::Table>(text).is_ok_and(|t| t.contains_key("budget"))
}

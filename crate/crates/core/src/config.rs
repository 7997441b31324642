//! TOML configuration.
//!
//! ```toml
//! [scenario]
//! preset = "lab"              # every other key overrides the preset
//! relative_speed_mps = -0.2
//!
//! [pipeline]
//! mode = "sim"                # sim | field_continuous | field_table
//!
//! [sweep]
//! speeds_mps = [-0.1, -0.2, -0.3, -0.4]
//! runs = 4
//! ```
//!
//! `pipeline.monitored_lane` defaults to `scenario.follower_lane`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::sim::{Preset, ScenarioConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{section}: {message}")]
    Parse { section: &'static str, message: String },
    #[error(transparent)]
    Scenario(#[from] crate::sim::SimError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error("invalid sweep field `{field}`: {reason}")]
    Sweep { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub speeds_mps: Vec<f64>,
    pub runs: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            speeds_mps: vec![-0.1, -0.2, -0.3, -0.4],
            runs: 4,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.speeds_mps.is_empty() {
            return Err(ConfigError::Sweep {
                field: "speeds_mps",
                reason: "must not be empty".into(),
            });
        }
        if let Some(v) = self.speeds_mps.iter().find(|v| !v.is_finite()) {
            return Err(ConfigError::Sweep {
                field: "speeds_mps",
                reason: format!("{v} is not finite"),
            });
        }
        if self.runs == 0 {
            return Err(ConfigError::Sweep {
                field: "runs",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub pipeline: PipelineConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::for_preset(Preset::Lab)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Option<toml::Table>,
    pipeline: Option<toml::Table>,
    sweep: Option<SweepConfig>,
}

fn merge<T>(base: &T, overrides: Option<toml::Table>, section: &'static str) -> Result<T, ConfigError>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let parse = |message: String| ConfigError::Parse { section, message };
    let mut table = toml::Table::try_from(base).map_err(|e| parse(e.to_string()))?;
    for (k, v) in overrides.unwrap_or_default() {
        table.insert(k, v);
    }
    table.try_into().map_err(|e: toml::de::Error| parse(e.message().to_owned()))
}

impl Config {
    pub fn for_preset(preset: Preset) -> Self {
        let scenario = ScenarioConfig::preset(preset);
        let pipeline = PipelineConfig {
            monitored_lane: scenario.follower_lane,
            ..PipelineConfig::default()
        };
        Self {
            scenario,
            pipeline,
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            section: "config",
            message: e.message().to_owned(),
        })?;
        let mut scenario_table = raw.scenario.unwrap_or_default();
        let preset = match scenario_table.remove("preset") {
            None => Preset::Lab,
            Some(v) => v
                .as_str()
                .ok_or("preset must be a string".to_owned())
                .and_then(|s| s.parse())
                .map_err(|message| ConfigError::Parse {
                    section: "scenario",
                    message,
                })?,
        };
        let scenario: ScenarioConfig = merge(&ScenarioConfig::preset(preset), Some(scenario_table), "scenario")?;
        let base = PipelineConfig {
            monitored_lane: scenario.follower_lane,
            ..PipelineConfig::default()
        };
        let pipeline: PipelineConfig = merge(&base, raw.pipeline, "pipeline")?;
        let cfg = Self {
            scenario,
            pipeline,
            sweep: raw.sweep.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate()?;
        self.pipeline.validate()?;
        self.sweep.validate()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

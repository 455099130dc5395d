//! TOML run configuration: defaults, then a file, then `key.path=value`
//! overrides. The resolved value is written into every run directory.

use std::path::Path;

use rastg_core::model::ModelConfig;
use rastg_core::preprocess::{SamplingPolicy, DEFAULT_TARGET_FRAMES};
use rastg_core::synth::SynthConfig;
use rastg_core::train::{SplitRatios, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub target_frames: usize,
    pub policy: SamplingPolicy,
    /// Append per-bone orientation quaternions as four extra channels.
    pub quaternions: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            target_frames: DEFAULT_TARGET_FRAMES,
            policy: SamplingPolicy::DeterministicFirst,
            quaternions: false,
        }
    }
}

impl DataConfig {
    pub fn channels(&self) -> usize {
        if self.quaternions {
            7
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` or `canonical`.
    pub preset: String,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            val: r.val,
            test: r.test,
            seed: 0,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub seed: u64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n: d.n,
            seed: d.seed,
            min_frames: d.min_frames,
            max_frames: d.max_frames,
            fps: d.fps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.model.preset, self.data.channels())?;
        m.expected_frames = Some(self.data.target_frames);
        m.init_seed = self.model.init_seed;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config()?;
        if self.data.target_frames == 0 {
            return Err(Error::Usage("data.target_frames must be positive".into()));
        }
        Ok(())
    }

    /// Resolves defaults < `file` < `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::format(p, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fsutil::write_atomic(&dir.join(SNAPSHOT_FILE), self.to_toml().as_bytes())
    }

    pub fn read_snapshot(dir: &Path) -> Result<Self> {
        Self::resolve(Some(&dir.join(SNAPSHOT_FILE)), &[])
    }
}

/// Applies one `a.b.c=value` override; the value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

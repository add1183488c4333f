//! Run configuration: TOML file, then flag/env overrides, then validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{LstmSettings, SuiteRow};
use crate::data::{synth, DataFormat, FlightMode, SplitConfig};
use crate::error::{Error, Result};
use crate::federated::FedConfig;
use crate::model::{Mode, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub path: PathBuf,
    pub format: DataFormat,
    pub flight_mode: FlightMode,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            path: PathBuf::from("out/dataset.csv"),
            format: DataFormat::Precomputed,
            flight_mode: FlightMode::ReleaseToPress,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub num_users: usize,
    pub samples_per_user: usize,
    pub phrase_pool: Vec<String>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let b = synth::standard_benchmark();
        Self {
            num_users: b.num_users,
            samples_per_user: b.samples_per_user,
            phrase_pool: b.phrase_pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSettings {
    pub rows: Vec<SuiteRow>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            rows: SuiteRow::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub mode: Mode,
    pub out: PathBuf,
    /// Checkpoint read by `eval` and `export-embeddings`; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataSettings,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub fed: FedConfig,
    pub lstm: LstmSettings,
    pub compare: CompareSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            mode: Mode::TempChar,
            out: PathBuf::from("out"),
            checkpoint: None,
            data: DataSettings::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSettings::default(),
            fed: FedConfig::default(),
            lstm: LstmSettings::default(),
            compare: CompareSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if overrides.seed.is_some() {
            cfg.seed = overrides.seed;
        }
        if let Some(m) = overrides.mode {
            cfg.mode = m;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.model.mode = cfg.mode;
        if let Some(s) = cfg.seed {
            cfg.fed.seed = s;
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("missing required field `seed` (set it in the config, --seed or TCKD_SEED)".into()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved config as `<out>/<name>.config.toml`.
    pub fn write_resolved(&self, name: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join(format!("{name}.config.toml")), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut c = RunConfig::default();
        c.seed = Some(3);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nlayers = 3").is_err());
        assert!(RunConfig::from_toml("[train.adam]\nlr = 1.0").is_err());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let c = RunConfig::from_toml("[train.adam]\nlearning_rate = 5e-4\n[lstm.train]\nepochs = 2").unwrap();
        assert_eq!(c.train.adam.learning_rate, 5e-4);
        assert_eq!(c.train.adam.beta2, 0.999);
        assert_eq!((c.lstm.train.epochs, c.lstm.hidden), (2, 64));
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\nmode = \"char_only\"\n").unwrap();
        let c = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.mode, c.model.mode), (Some(1), Mode::CharOnly, Mode::CharOnly));
        let o = Overrides {
            seed: Some(9),
            mode: Some(Mode::TempChar),
            out: None,
        };
        let c = RunConfig::load(Some(&p), &o).unwrap();
        assert_eq!((c.seed, c.model.mode, c.fed.seed), (Some(9), Mode::TempChar, 9));
    }

    #[test]
    fn missing_seed_names_field() {
        let err = RunConfig::default().seed().unwrap_err().to_string();
        assert!(err.contains("seed"));
    }
}

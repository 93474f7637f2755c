use std::fs;
use std::path::{Path, PathBuf};

use mp4sr::dataio::SynthConfig;
use mp4sr::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Contents of a `--config` TOML file. Relative paths are taken from the
/// current directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// `user_id\titem_id\ttimestamp` file.
    pub interactions: Option<PathBuf>,
    /// Binary feature store.
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn interactions(&self) -> Result<&Path, CliError> {
        self.interactions
            .as_deref()
            .ok_or_else(|| CliError::Config("no interactions file: set `interactions` in the config".into()))
    }

    pub fn features(&self) -> Result<&Path, CliError> {
        self.features
            .as_deref()
            .ok_or_else(|| CliError::Config("no feature store: set `features` in the config".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfigFile::default();
        let back: RunConfigFile = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfigFile>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfigFile>("[train]\nlearning_rte = 0.1").is_err());
        let ok: RunConfigFile = toml::from_str("[train]\nvariants = [\"no-nip\", \"cold-start\"]").unwrap();
        assert_eq!(ok.train.variants.len(), 2);
    }
}

//! Workbench configuration file (TOML).
//!
//! ```toml
//! [hardware]
//! model = "hw-spec"
//! sets = 4
//! ways = 2
//! line = 4
//! window = 8
//! nesting = 2
//! attacker = "cache+pc"
//! max_micro_steps = 100000
//!
//! [contract]
//! window = 16
//! nesting = 2
//! max_steps = 10000
//!
//! [pairs]
//! domain = "0..3"
//! seed = 0
//! ```
//!
//! Every key is optional; omitted keys take the built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{Domain, PairSpec, Strategy};
use crate::contracts::ContractConfig;
use crate::hardware::HwConfig;

/// Committed defaults, identical to `Config::default()`.
pub const DEFAULTS_TOML: &str = include_str!("../corpus/defaults.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsConfig {
    pub domain: Domain,
    /// Sample this many pairs instead of enumerating all of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub seed: u64,
}

impl PairsConfig {
    pub fn to_spec(&self) -> PairSpec {
        let strategy = match self.samples {
            None => Strategy::Exhaustive,
            Some(n) => Strategy::Sampled { n, seed: self.seed },
        };
        PairSpec { domain: self.domain, strategy, public_variants: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub hardware: HwConfig,
    pub contract: ContractConfig,
    pub pairs: PairsConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Config::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware::{AttackerMode, HardwareModelId};

    #[test]
    fn committed_defaults_match_builtin() {
        assert_eq!(Config::from_toml(DEFAULTS_TOML).unwrap(), Config::default());
    }

    #[test]
    fn partial_file_and_round_trip() {
        let c = Config::from_toml("[hardware]\nmodel = \"hw-tt\"\nattacker = \"cache\"\n[pairs]\ndomain = \"0..1\"\n").unwrap();
        assert_eq!(c.hardware.model, HardwareModelId::HwTt);
        assert_eq!(c.hardware.attacker, AttackerMode::Cache);
        assert_eq!(c.hardware.sets, 4);
        assert_eq!(c.pairs.domain, Domain { lo: 0, hi: 1 });
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_domains() {
        assert!(Config::from_toml("[hardware]\ncolour = 1\n").is_err());
        assert!(Config::from_toml("[pairs]\ndomain = \"0..70000\"\n").is_err());
    }
}

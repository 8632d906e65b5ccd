//! Run configuration files: TOML with optional `[synth]`, `[train]`
//! (including `[train.model]`) and `[baseline]` sections.

use std::fs;
use std::path::{Path, PathBuf};

use alst::analysis::BaselineConfig;
use alst::data::SynthConfig;
use alst::train::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming a config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "ALST_CONFIG";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
}

/// A parsed config together with the text it came from, so that it can be
/// echoed unchanged next to every output.
#[derive(Clone, Debug, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: Option<String>,
}

impl LoadedConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).context("invalid config")?;
        Ok(LoadedConfig {
            config,
            source: Some(text.to_string()),
        })
    }

    /// Reads `explicit`, else the file named by [`CONFIG_ENV`], else
    /// returns defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        match path {
            Some(p) => {
                let text = fs::read_to_string(&p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(LoadedConfig::default()),
        }
    }

    /// Applies `--seed` to every section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.config.synth.seed = s;
            self.config.train.seed = s;
            self.config.baseline.seed = s;
        }
        self
    }
}

//! Run configuration file and the manifest written by every command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crossrisk::data::Profile;
use crossrisk::metrics::Period;
use crossrisk::model::ModelConfig;
use crossrisk::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Grid, road graph size and generator knobs of one synthetic city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitySetup {
    pub name: String,
    pub w: usize,
    pub h: usize,
    pub nodes: usize,
    #[serde(default)]
    pub profile: Profile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cities: Vec<CitySetup>,
    pub weeks: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let city = |name: &str, nodes, valid: usize| CitySetup {
            name: name.into(),
            w: 20,
            h: 20,
            nodes,
            profile: Profile {
                valid_fraction: valid as f64 / 400.0,
                ..Profile::default()
            },
        };
        DataConfig {
            cities: vec![city("city-a", 60, 243), city("city-b", 50, 197)],
            weeks: 4,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// The first `n` configured cities, extended with renamed copies when
    /// more are requested than configured.
    pub fn take_cities(&self, n: usize) -> Result<Vec<CitySetup>, CliError> {
        if self.cities.is_empty() {
            return Err(CliError::new("no cities configured"));
        }
        Ok((0..n)
            .map(|k| {
                let mut c = self.cities[k % self.cities.len()].clone();
                if k >= self.cities.len() {
                    c.name = format!("{}-{k}", c.name);
                }
                c
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub period: Period,
    pub noise_levels: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            period: Period::AllDay,
            noise_levels: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a config file, or the effective config of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::path(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::path(path, e))?;
        let value = match value.get("command").and(value.get("config")) {
            Some(inner) => inner.clone(),
            None => value,
        };
        serde_json::from_value(value).map_err(|e| CliError::path(path, e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

pub const MANIFEST_FILE: &str = "run.json";

impl RunManifest {
    pub fn new(command: &str, config_path: Option<PathBuf>, config: &RunConfig) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            config_path,
            config: config.clone(),
            seeds: Seeds {
                data: config.data.seed,
                train: config.train.seed,
                eval: config.eval.seed,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CROSSRISK_VERSION").into(),
            timings: BTreeMap::new(),
        }
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| CliError::path(&path, e))?;
        Ok(path)
    }
}

//! Experiment configuration.
//!
//! A configuration is one TOML document holding the memory layout,
//! background processes, activity templates, secrets, workload, search
//! settings and per-scenario targets. The calibrated defaults ship with the
//! crate (`config/default.toml`); the RSA keys referenced by secrets live in
//! a `[keys]` table and default to the fixtures in `config/keys.toml`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::Scenario;
use crate::keygen::RsaKey;
use crate::mem_model::Endianness;
use crate::searcher::SearchConfig;
use crate::simulator::{
    ActivityKind, BackgroundSpec, RegionSpec, TemplateError, TemplateSpec, WorkloadConfig, World,
};

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");
pub const DEFAULT_KEYS: &str = include_str!("../config/keys.toml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("key {0:?} is missing or inconsistent")]
    Key(String),
    #[error("secret {0:?} is not defined")]
    UnknownSecret(String),
    #[error("scenario {0} is not configured")]
    UnknownScenario(Scenario),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Material {
    /// One prime factor of the RSA key named by `key`.
    RsaFactor,
    /// The expanded schedule of the disk encryption key.
    AesSchedule,
    /// The synthetic kernel key-context record holding the disk key.
    KeyContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecretConfig {
    pub region: String,
    pub material: Material,
    #[serde(default)]
    pub key: Option<String>,
    #[serde(default)]
    pub endianness: Endianness,
    #[serde(default)]
    pub per_instance: bool,
    /// Purge each copy when the SSH session of its activity ends.
    #[serde(default)]
    pub session_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Tracking stops on the end event of this activity kind.
    pub stop_on: ActivityKind,
    /// Secrets whose discovery counts as success.
    pub targets: Vec<String>,
    pub analysis_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Tracking starts uniformly inside this window.
    pub start_window_ms: [f64; 2],
    /// An observation without a stop event gives up after this long.
    pub max_observation_ms: f64,
    /// Observation and search rounds per iteration.
    pub max_attempts: u32,
    pub rsa_stride: usize,
    pub aes_stride: usize,
    /// Byte alignment of planted secrets.
    pub secret_alignment: usize,
    /// Plant the disk key as two AES-128 schedules (an XTS key pair) instead
    /// of one AES-256 schedule.
    pub fde_xts_split: bool,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            start_window_ms: [600_000.0, 3_600_000.0],
            max_observation_ms: 3_600_000.0,
            max_attempts: 1,
            rsa_stride: 8,
            aes_stride: 16,
            secret_alignment: 16,
            fde_xts_split: false,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyHex {
    pub modulus_hex: String,
    pub p_hex: String,
    pub q_hex: String,
}

#[derive(Debug, Clone, Deserialize)]
struct KeyFile {
    keys: BTreeMap<String, KeyHex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub background: Vec<BackgroundSpec>,
    pub templates: BTreeMap<ActivityKind, TemplateSpec>,
    #[serde(default)]
    pub secrets: BTreeMap<String, SecretConfig>,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub scenarios: BTreeMap<Scenario, ScenarioConfig>,
    #[serde(default)]
    pub harness: HarnessConfig,
    #[serde(default)]
    pub keys: BTreeMap<String, KeyHex>,
}

impl Config {
    /// Parses a configuration; an empty `[keys]` table is filled with the
    /// bundled fixture keys.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut config: Config = toml::from_str(text)?;
        if config.keys.is_empty() {
            config.keys = toml::from_str::<KeyFile>(DEFAULT_KEYS)?.keys;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_toml(&text)
    }

    /// The bundled calibrated defaults.
    pub fn calibrated() -> Self {
        Config::from_toml(DEFAULT_CONFIG).expect("bundled configuration is valid")
    }

    pub fn world(&self) -> Result<World, TemplateError> {
        World::new(&self.regions, &self.templates, &self.background)
    }

    pub fn key(&self, name: &str) -> Result<RsaKey, ConfigError> {
        let k = self
            .keys
            .get(name)
            .ok_or_else(|| ConfigError::Key(name.to_string()))?;
        RsaKey::from_hex(&k.modulus_hex, &k.p_hex, &k.q_hex)
            .ok_or_else(|| ConfigError::Key(name.to_string()))
    }

    pub fn scenario(&self, scenario: Scenario) -> Result<&ScenarioConfig, ConfigError> {
        self.scenarios
            .get(&scenario)
            .ok_or(ConfigError::UnknownScenario(scenario))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world()?;
        self.workload
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, secret) in &self.secrets {
            if secret.material == Material::RsaFactor {
                let key = secret
                    .key
                    .as_deref()
                    .ok_or_else(|| ConfigError::Key(name.clone()))?;
                self.key(key)?;
            }
        }
        for (scenario, sc) in &self.scenarios {
            if sc.targets.is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "scenario {scenario} has no targets"
                )));
            }
            for t in &sc.targets {
                if !self.secrets.contains_key(t) {
                    return Err(ConfigError::UnknownSecret(t.clone()));
                }
            }
            if sc.analysis_ms.is_nan() || sc.analysis_ms < 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "scenario {scenario} needs a nonnegative analysis time"
                )));
            }
        }
        let h = &self.harness;
        if !(h.start_window_ms[0] >= 0.0 && h.start_window_ms[1] >= h.start_window_ms[0]) {
            return Err(ConfigError::Invalid("start window must be ordered".into()));
        }
        if h.max_attempts == 0 || h.rsa_stride == 0 || h.aes_stride == 0 || h.secret_alignment == 0
        {
            return Err(ConfigError::Invalid(
                "attempts, strides and alignment must be positive".into(),
            ));
        }
        if !self.search.extract_latency.is_valid() {
            return Err(ConfigError::Invalid(
                "extraction latency must be positive and ordered".into(),
            ));
        }
        Ok(())
    }
}

//! Service configuration, read from a TOML file.
//!
//! ```toml
//! data_dir = "data"
//! listen = "127.0.0.1:8080"
//! plugins = ["plugins.json"]
//!
//! [provider]
//! kind = "mock"
//! script = "mock.json"
//!
//! [thresholds]
//! resolution = 0.75
//! duplicate = 0.9
//! top_k = 5
//! max_iterations = 20
//! ```
//!
//! Relative paths are taken relative to the directory of the config file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mitigraph_core::kb_compiler::{DEFAULT_DUPLICATE_THRESHOLD, DEFAULT_RESOLUTION_THRESHOLD};
use mitigraph_core::kb_store::DEFAULT_TOP_K;
use mitigraph_core::llm_provider::HttpProviderConfig;
use mitigraph_core::orchestrator::DEFAULT_MAX_ITERATIONS;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Replays a script file; without one every call is unscripted.
    Mock {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Http(HttpProviderConfig),
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Mock { script: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    #[default]
    Hash,
    Http(HttpProviderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum cosine for resolving a linker by intent.
    pub resolution: f64,
    /// Cosine above which a mined history step counts as an existing node.
    pub duplicate: f64,
    pub top_k: usize,
    pub max_iterations: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION_THRESHOLD,
            duplicate: DEFAULT_DUPLICATE_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen: SocketAddr,
    pub provider: ProviderConfig,
    /// Reviewer for planned actions; the main provider when absent.
    pub expert: Option<ProviderConfig>,
    pub embedder: EmbedderConfig,
    pub thresholds: Thresholds,
    /// Plugin manifest files.
    pub plugins: Vec<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            provider: ProviderConfig::default(),
            expert: None,
            embedder: EmbedderConfig::default(),
            thresholds: Thresholds::default(),
            plugins: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|message| ConfigError::Invalid {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Parse TOML text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let mut config: ServiceConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        config.rebase(base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        let t = &self.thresholds;
        for (name, value) in [("resolution", t.resolution), ("duplicate", t.duplicate)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(format!("thresholds.{name} must be in (0, 1], got {value}"));
            }
        }
        if t.top_k == 0 {
            return Err("thresholds.top_k must be at least 1".into());
        }
        if t.max_iterations == 0 {
            return Err("thresholds.max_iterations must be at least 1".into());
        }
        Ok(())
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data_dir);
        self.plugins.iter_mut().for_each(join);
        for provider in std::iter::once(&mut self.provider).chain(self.expert.as_mut()) {
            if let ProviderConfig::Mock {
                script: Some(script),
            } = provider
            {
                join(script);
            }
        }
    }

    pub fn kb_path(&self) -> PathBuf {
        self.data_dir.join("kb.jsonl")
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.data_dir.join("sessions")
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::builtin::HandlerSpec;

pub const DEFAULT_PLUGIN_DEADLINE: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("plugin `{0}` is already registered")]
    DuplicatePlugin(String),
    #[error("invalid plugin manifest {source_name}: {message}")]
    InvalidManifest {
        source_name: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    /// Semantic type, e.g. `url`, `hostname`, `text`.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

/// Substring → outcome label. Patterns are tried in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomePattern {
    pub pattern: String,
    pub outcome_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub outcome_patterns: Vec<OutcomePattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_ms: Option<u64>,
}

impl PluginManifest {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            params: Vec::new(),
            outcome_patterns: Vec::new(),
            deadline_ms: None,
        }
    }

    pub fn with_pattern(
        mut self,
        pattern: impl Into<String>,
        outcome_label: impl Into<String>,
    ) -> Self {
        self.outcome_patterns.push(OutcomePattern {
            pattern: pattern.into(),
            outcome_label: outcome_label.into(),
        });
        self
    }

    pub fn deadline(&self) -> Duration {
        self.deadline_ms
            .map_or(DEFAULT_PLUGIN_DEADLINE, Duration::from_millis)
    }

    /// Label of the first pattern contained in `output`.
    pub fn match_outcome(&self, output: &str) -> Option<&str> {
        self.outcome_patterns
            .iter()
            .find(|p| output.contains(&p.pattern))
            .map(|p| p.outcome_label.as_str())
    }
}

/// What a handler is given for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginInput {
    pub session_id: String,
    pub step_index: usize,
    pub node_id: Option<String>,
    pub action: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginOutput {
    pub output: String,
    pub exit_status: i32,
}

#[async_trait]
pub trait PluginHandler: Send + Sync {
    /// `Err` carries a diagnostic; the engine turns it into an unmatched
    /// insight.
    async fn invoke(&self, input: PluginInput) -> Result<PluginOutput, String>;
}

#[derive(Clone)]
pub struct Plugin {
    pub manifest: PluginManifest,
    pub handler: Arc<dyn PluginHandler>,
}

impl fmt::Debug for Plugin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plugin")
            .field("manifest", &self.manifest)
            .finish_non_exhaustive()
    }
}

impl Plugin {
    pub fn new(manifest: PluginManifest, handler: impl PluginHandler + 'static) -> Self {
        Self {
            manifest,
            handler: Arc::new(handler),
        }
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }
}

/// Manifest file on disk: the manifest plus which built-in handler backs it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    #[serde(flatten)]
    pub manifest: PluginManifest,
    pub handler: HandlerSpec,
}

impl ManifestFile {
    pub fn into_plugin(self) -> Plugin {
        Plugin {
            manifest: self.manifest,
            handler: self.handler.build(),
        }
    }
}

/// Name → plugin. Build it once, then share it behind an `Arc`: a plan
/// validated against a registry runs against that same registry.
#[derive(Debug, Clone, Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Plugin>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Plugin) -> Result<(), RegistryError> {
        if self.plugins.contains_key(plugin.name()) {
            return Err(RegistryError::DuplicatePlugin(plugin.name().to_string()));
        }
        self.plugins.insert(plugin.name().to_string(), plugin);
        Ok(())
    }

    /// Parse a JSON manifest file (a single manifest or a list) and register
    /// every plugin in it.
    pub fn register_manifest_json(
        &mut self,
        source_name: &str,
        text: &str,
    ) -> Result<usize, RegistryError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            Many(Vec<ManifestFile>),
            One(Box<ManifestFile>),
        }
        let invalid = |message: String| RegistryError::InvalidManifest {
            source_name: source_name.to_string(),
            message,
        };
        let files =
            match serde_json::from_str::<OneOrMany>(text).map_err(|e| invalid(e.to_string()))? {
                OneOrMany::Many(files) => files,
                OneOrMany::One(file) => vec![*file],
            };
        let count = files.len();
        for file in files {
            if file.manifest.name.trim().is_empty() {
                return Err(invalid("plugin name is empty".into()));
            }
            self.register(file.into_plugin())?;
        }
        Ok(count)
    }

    pub fn register_manifest_file(&mut self, path: &Path) -> Result<usize, RegistryError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| RegistryError::InvalidManifest {
            source_name: name.clone(),
            message: e.to_string(),
        })?;
        self.register_manifest_json(&name, &text)
    }

    pub fn get(&self, name: &str) -> Option<&Plugin> {
        self.plugins.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.plugins.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.plugins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn manifests(&self) -> impl Iterator<Item = &PluginManifest> {
        self.plugins.values().map(|p| &p.manifest)
    }
}

use std::path::PathBuf;
use std::sync::Arc;

use mitigraph_core::execution_engine::RegistryError;
use mitigraph_core::ingest::IngestOptions;
use mitigraph_core::kb_store::StoreError;
use mitigraph_core::llm_provider::{HttpProvider, ProviderError};
use mitigraph_core::orchestrator::{JsonlLog, LogError, OrchestratorConfig};
use mitigraph_core::{
    Embedder, HashEmbedder, KbStore, LlmProvider, MockProvider, MockScript, Orchestrator,
    PluginRegistry,
};
use thiserror::Error;

use crate::config::{EmbedderConfig, ProviderConfig, ServiceConfig};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("cannot create data directory {path}: {source}")]
    DataDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot load knowledge base: {0}")]
    KnowledgeBase(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Plugins(#[from] RegistryError),
    #[error(transparent)]
    SessionLog(#[from] LogError),
}

pub fn build_provider(config: &ProviderConfig) -> Result<Arc<dyn LlmProvider>, ProviderError> {
    Ok(match config {
        ProviderConfig::Mock { script: None } => Arc::new(MockProvider::new(MockScript::default())),
        ProviderConfig::Mock { script: Some(path) } => {
            Arc::new(MockProvider::new(MockScript::load(path)?))
        }
        ProviderConfig::Http(http) => Arc::new(HttpProvider::new(http.clone())?),
    })
}

pub fn build_embedder(config: &EmbedderConfig) -> Result<Arc<dyn Embedder>, ProviderError> {
    Ok(match config {
        EmbedderConfig::Hash => Arc::new(HashEmbedder),
        EmbedderConfig::Http(http) => Arc::new(HttpProvider::new(http.clone())?),
    })
}

pub fn build_registry(config: &ServiceConfig) -> Result<PluginRegistry, RegistryError> {
    let mut registry = PluginRegistry::new();
    for path in &config.plugins {
        registry.register_manifest_file(path)?;
    }
    Ok(registry)
}

/// A knowledge base store for `config`, loaded from the data directory
/// when a saved knowledge base exists there.
pub async fn open_kb(config: &ServiceConfig) -> Result<Arc<KbStore>, RuntimeError> {
    let store = KbStore::new(build_embedder(&config.embedder)?);
    let path = config.kb_path();
    if path.exists() {
        let n = store.load(&path).await?;
        tracing::info!(nodes = n, path = %path.display(), "knowledge base loaded");
    }
    Ok(Arc::new(store))
}

/// Everything a running service needs, built from one config.
pub struct Runtime {
    pub config: ServiceConfig,
    pub kb: Arc<KbStore>,
    pub orchestrator: Arc<Orchestrator>,
}

impl Runtime {
    pub async fn open(config: ServiceConfig) -> Result<Self, RuntimeError> {
        let sessions = config.sessions_dir();
        std::fs::create_dir_all(&sessions).map_err(|source| RuntimeError::DataDir {
            path: sessions.clone(),
            source,
        })?;
        let kb = open_kb(&config).await?;
        let registry = Arc::new(build_registry(&config)?);
        let provider = build_provider(&config.provider)?;
        let mut orchestrator = Orchestrator::new(kb.clone(), registry, provider)
            .with_log(Arc::new(JsonlLog::open(sessions)?))
            .with_config(OrchestratorConfig {
                max_iterations: config.thresholds.max_iterations,
                top_k: config.thresholds.top_k,
            });
        if let Some(expert) = &config.expert {
            orchestrator = orchestrator.with_expert(build_provider(expert)?);
        }
        Ok(Self {
            config,
            kb,
            orchestrator: Arc::new(orchestrator),
        })
    }

    pub fn ingest_options(&self, replace: bool) -> IngestOptions {
        IngestOptions {
            replace,
            resolution_threshold: self.config.thresholds.resolution,
            persist_to: Some(self.config.kb_path()),
        }
    }
}

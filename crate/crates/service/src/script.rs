//! Headless sessions driven by a script of OCE turns.
//!
//! ```json
//! {
//!   "tsgs": ["db_latency.tsg.json"],
//!   "mock": "mock.json",
//!   "plugins": ["plugins.json"],
//!   "max_iterations": 20,
//!   "turns": [{"message": "DB latency alert"}, {"result": "failover completed"}]
//! }
//! ```
//!
//! Paths are relative to the script file. A `message` turn is submitted
//! with `submit_message`, a `result` turn with `submit_manual_result`, and
//! after each the session runs until it needs a human again.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mitigraph_core::clock::{LogicalClock, SequentialIds};
use mitigraph_core::ingest::{ingest_batch, IngestError, IngestOptions};
use mitigraph_core::orchestrator::{
    MemoryLog, OrchestratorConfig, OrchestratorError, DEFAULT_MAX_ITERATIONS,
};
use mitigraph_core::{
    parse_structured_tsg, HashEmbedder, KbStore, MitigationSession, MockProvider, MockScript,
    Orchestrator, PluginRegistry, SessionEvent, SessionState,
};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Turn {
    Message(String),
    Result(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatScript {
    pub tsgs: Vec<PathBuf>,
    pub mock: PathBuf,
    #[serde(default)]
    pub plugins: Vec<PathBuf>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    pub turns: Vec<Turn>,
}

fn default_max_iterations() -> u32 {
    DEFAULT_MAX_ITERATIONS
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid script {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("turn {turn} is a {kind}, but the session is {state}")]
    UnexpectedTurn {
        turn: usize,
        kind: &'static str,
        state: SessionState,
    },
}

fn read(path: &Path) -> Result<String, ScriptError> {
    std::fs::read_to_string(path).map_err(|e| ScriptError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl ChatScript {
    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let mut script: ChatScript =
            serde_json::from_str(&read(path)?).map_err(|e| ScriptError::Invalid {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in script
            .tsgs
            .iter_mut()
            .chain(script.plugins.iter_mut())
            .chain(std::iter::once(&mut script.mock))
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(script)
    }

    /// A deterministic orchestrator over the script's corpus, mock and
    /// plugins, with an in-memory log, a logical clock and sequential ids.
    pub async fn orchestrator(&self) -> Result<Orchestrator, ScriptError> {
        let store = KbStore::new(Arc::new(HashEmbedder));
        let mut tsgs = Vec::new();
        for path in &self.tsgs {
            tsgs.push(parse_structured_tsg(&read(path)?).map_err(IngestError::from)?);
        }
        ingest_batch(&store, &tsgs, &IngestOptions::default()).await?;
        let mut registry = PluginRegistry::new();
        for path in &self.plugins {
            registry
                .register_manifest_file(path)
                .map_err(|e| ScriptError::Invalid {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
        }
        let mock = MockScript::load(&self.mock).map_err(|e| ScriptError::Invalid {
            path: self.mock.clone(),
            message: e.to_string(),
        })?;
        Ok(Orchestrator::new(
            Arc::new(store),
            Arc::new(registry),
            Arc::new(MockProvider::new(mock)),
        )
        .with_log(Arc::new(MemoryLog::new()))
        .with_clock(Arc::new(LogicalClock::default()))
        .with_ids(Arc::new(SequentialIds::new("session")))
        .with_config(OrchestratorConfig {
            max_iterations: self.max_iterations,
            ..Default::default()
        }))
    }

    /// Play every turn against a fresh orchestrator. Stops early when the
    /// session reaches an absorbing state.
    pub async fn run(&self) -> Result<ChatOutcome, ScriptError> {
        let orchestrator = self.orchestrator().await?;
        let mut session = orchestrator.start_session().await?;
        for (i, turn) in self.turns.iter().enumerate() {
            if session.state.is_absorbing() {
                break;
            }
            session = match turn {
                Turn::Message(text) => {
                    if !matches!(
                        session.state,
                        SessionState::AwaitingMessage | SessionState::Clarifying
                    ) {
                        return Err(unexpected(i, "message", session.state));
                    }
                    orchestrator
                        .submit_message(&session.session_id, text)
                        .await?
                }
                Turn::Result(text) => {
                    if session.state != SessionState::AwaitingManualResult {
                        return Err(unexpected(i, "result", session.state));
                    }
                    orchestrator
                        .submit_manual_result(&session.session_id, text)
                        .await?
                }
            };
            if !session.state.is_absorbing() && !session.state.needs_human() {
                session = orchestrator.run(&session.session_id).await?;
            }
        }
        let events = orchestrator.events(&session.session_id)?;
        Ok(ChatOutcome { session, events })
    }
}

fn unexpected(turn: usize, kind: &'static str, state: SessionState) -> ScriptError {
    ScriptError::UnexpectedTurn {
        turn: turn + 1,
        kind,
        state,
    }
}

pub struct ChatOutcome {
    pub session: MitigationSession,
    pub events: Vec<SessionEvent>,
}

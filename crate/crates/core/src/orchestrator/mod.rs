//! Mitigation sessions: the loop of interpret, retrieve, select, plan,
//! execute or delegate, and iterate on the resulting insights until the
//! incident is resolved or escalated.

mod engine;
mod log;
mod session;

use thiserror::Error;

pub use engine::Orchestrator;
pub use log::{EventLog, JsonlLog, LogError, MemoryLog};
pub use session::{
    replay, to_jsonl, Candidate, ContinuationSource, CorruptLog, Escalation, EscalationReason,
    EventPayload, MitigationSession, SessionEvent, SessionMemory, SessionState, Transition,
};

pub const DEFAULT_MAX_ITERATIONS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrchestratorConfig {
    pub max_iterations: u32,
    pub top_k: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            top_k: crate::kb_store::DEFAULT_TOP_K,
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("session {session_id} is {state}; {operation} is not allowed")]
    InvalidState {
        session_id: String,
        state: SessionState,
        operation: &'static str,
    },
    #[error("session {0} is busy with another request")]
    Busy(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("session {session_id}: {source}")]
    CorruptLog {
        session_id: String,
        #[source]
        source: CorruptLog,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("internal error: {0}")]
    Internal(String),
}

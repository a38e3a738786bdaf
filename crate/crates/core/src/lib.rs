//! Incident-mitigation copilot engine.
//!
//! Troubleshooting guides (TSGs) are parsed and quality-checked
//! ([`tsg_parser`]), lowered into intent-indexed knowledge nodes linked by
//! outcome ([`kb_compiler`]), and stored behind an exact cosine index
//! ([`kb_store`]). Mitigation sessions ([`orchestrator`]) drive the agent
//! pipeline ([`agents`]) over that graph, run executable steps through
//! plugins ([`execution_engine`]) and hand the rest to the on-call engineer.
//! Every language-model interaction goes through [`llm_provider`].

pub mod agents;
pub mod clock;
pub mod execution_engine;
pub mod ingest;
pub mod kb_compiler;
pub mod kb_store;
pub mod llm_provider;
pub mod orchestrator;
pub mod prompts;
pub mod tsg_parser;

pub use agents::{ActionPlan, IntentResult, PlanStep, StepMode};
pub use execution_engine::{Insight, PluginRegistry};
pub use kb_compiler::{compile, KnowledgeNode, Linker, NodeType};
pub use kb_store::{KbStore, KnowledgeBase, ScoredNode};
pub use llm_provider::{Embedder, HashEmbedder, LlmProvider, MockProvider, MockScript};
pub use orchestrator::{MitigationSession, Orchestrator, SessionEvent, SessionState};
pub use tsg_parser::{parse_structured_tsg, validate_quality, QualityReport, StructuredTsg};

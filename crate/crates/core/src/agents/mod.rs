//! The four language-model agents of a mitigation round. Each one renders
//! a prompt template, makes a schema-validated provider call and then
//! checks the answer against deterministic rules before anything leaves
//! the agent.

mod interpreter;
mod planner;
mod post_processor;
mod selector;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution_engine::Insight;
use crate::llm_provider::{
    chat, ChatError, ChatRequest, LlmProvider, ProviderError, SchemaId, StructuredOutput,
};

pub use interpreter::{interpret_intent, IntentResult, INTERPRETER_AGENT};
pub use planner::{plan_actions, ActionPlan, PlanStep, StepMode, PLANNER_AGENT};
pub use post_processor::{post_process, PlanReview, StepRevision, POST_PROCESSOR_AGENT};
pub use selector::{select_nodes, SELECTOR_AGENT};

/// Re-prompts per agent call after the first attempt.
pub const AGENT_RETRIES: usize = 2;

/// Turns of conversation handed to the agents.
pub const MEMORY_TURNS: usize = 20;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("output violates {schema}: {message}")]
    SchemaViolation { schema: SchemaId, message: String },
    /// The planner produced no steps; the session escalates.
    #[error("planner returned an empty plan")]
    EmptyPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnRole {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: TurnRole,
    pub text: String,
    pub at: DateTime<Utc>,
}

/// What agents see of a session: the latest turns verbatim and every
/// insight so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Memory {
    pub turns: Vec<Turn>,
    pub insights: Vec<Insight>,
}

impl Memory {
    pub fn new(turns: &[Turn], insights: &[Insight]) -> Self {
        Self {
            turns: turns[turns.len().saturating_sub(MEMORY_TURNS)..].to_vec(),
            insights: insights.to_vec(),
        }
    }

    fn render(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            role: TurnRole,
            text: &'a str,
        }
        #[derive(Serialize)]
        struct InsightView<'a> {
            step_index: usize,
            node_id: Option<&'a str>,
            outcome_label: &'a str,
            summary: &'a str,
        }
        let turns: Vec<_> = self
            .turns
            .iter()
            .map(|t| View {
                role: t.role,
                text: &t.text,
            })
            .collect();
        let insights: Vec<_> = self
            .insights
            .iter()
            .map(|i| InsightView {
                step_index: i.step_index,
                node_id: i.node_id.as_deref(),
                outcome_label: &i.outcome_label,
                summary: &i.summary,
            })
            .collect();
        serde_json::json!({ "turns": turns, "insights": insights }).to_string()
    }
}

/// Why a parsed answer was refused.
enum Rejection {
    /// Re-prompt with this message.
    Retry(String),
    Fatal(AgentError),
}

/// One agent call: up to `1 + AGENT_RETRIES` attempts, each failure fed back
/// to the model. Provider errors count against the same budget.
async fn ask<T, R>(
    provider: &dyn LlmProvider,
    request: &ChatRequest,
    validate: impl Fn(T) -> Result<R, Rejection>,
) -> Result<R, AgentError>
where
    T: StructuredOutput,
{
    let mut attempt_request = request.clone();
    let mut attempt = 0;
    loop {
        let failure = match chat::<T>(provider, &attempt_request).await {
            Ok(value) => match validate(value) {
                Ok(result) => return Ok(result),
                Err(Rejection::Fatal(err)) => return Err(err),
                Err(Rejection::Retry(message)) => AgentError::SchemaViolation {
                    schema: T::SCHEMA,
                    message,
                },
            },
            Err(ChatError::Provider(err)) => AgentError::Provider(err),
            Err(ChatError::SchemaViolation {
                schema, message, ..
            }) => AgentError::SchemaViolation { schema, message },
        };
        if attempt == AGENT_RETRIES {
            return Err(failure);
        }
        tracing::debug!(agent = %request.agent, attempt, error = %failure, "re-prompting agent");
        attempt_request = request.with_feedback(&failure.to_string());
        attempt += 1;
    }
}

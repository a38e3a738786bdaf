//! Chat-completion and embedding providers.
//!
//! Agents never read free text from a model: every chat call names an
//! output schema and [`chat`] either returns a value that deserialized and
//! passed its [`StructuredOutput::check`], or a [`ChatError::SchemaViolation`]
//! carrying the raw text.

mod embed;
mod http;
mod mock;

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use embed::{
    cosine, l2_normalize, CachedEmbedder, EmbeddingVector, HashEmbedder, HASH_EMBEDDER_ID,
};
pub use http::{HttpProvider, HttpProviderConfig};
pub use mock::{MockProvider, MockScript, ScriptEntry, ScriptedResponse};

/// Default per-call deadline for chat and embedding requests.
pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned an unusable response: {0}")]
    BadResponse(String),
    #[error("no scripted response for prompt key {key} (agent {agent})")]
    Unscripted { key: String, agent: String },
    #[error("provider call exceeded its {0:?} deadline")]
    Timeout(Duration),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("output violates schema {schema}: {message}")]
    SchemaViolation {
        schema: SchemaId,
        message: String,
        raw: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Registered structured-output shapes. The set is closed: a request can
/// only name a schema that exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemaId {
    #[serde(rename = "structured_tsg.v1")]
    StructuredTsg,
    #[serde(rename = "history_extraction.v1")]
    HistoryExtraction,
    #[serde(rename = "intent_result.v1")]
    IntentResult,
    #[serde(rename = "node_selection.v1")]
    NodeSelection,
    #[serde(rename = "action_plan.v1")]
    ActionPlan,
    #[serde(rename = "plan_review.v1")]
    PlanReview,
}

impl SchemaId {
    pub const ALL: [SchemaId; 6] = [
        SchemaId::StructuredTsg,
        SchemaId::HistoryExtraction,
        SchemaId::IntentResult,
        SchemaId::NodeSelection,
        SchemaId::ActionPlan,
        SchemaId::PlanReview,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::StructuredTsg => "structured_tsg.v1",
            SchemaId::HistoryExtraction => "history_extraction.v1",
            SchemaId::IntentResult => "intent_result.v1",
            SchemaId::NodeSelection => "node_selection.v1",
            SchemaId::ActionPlan => "action_plan.v1",
            SchemaId::PlanReview => "plan_review.v1",
        }
    }

    /// JSON Schema document shown to the model.
    pub fn json_schema(self) -> &'static str {
        match self {
            SchemaId::StructuredTsg => {
                include_str!("../../resources/schemas/structured_tsg.v1.json")
            }
            SchemaId::HistoryExtraction => {
                include_str!("../../resources/schemas/history_extraction.v1.json")
            }
            SchemaId::IntentResult => include_str!("../../resources/schemas/intent_result.v1.json"),
            SchemaId::NodeSelection => {
                include_str!("../../resources/schemas/node_selection.v1.json")
            }
            SchemaId::ActionPlan => include_str!("../../resources/schemas/action_plan.v1.json"),
            SchemaId::PlanReview => include_str!("../../resources/schemas/plan_review.v1.json"),
        }
    }

    pub fn parse(id: &str) -> Option<SchemaId> {
        Self::ALL.into_iter().find(|s| s.as_str() == id)
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Name of the calling agent; part of the mock prompt key.
    pub agent: String,
    pub messages: Vec<ChatMessage>,
    pub output_schema: SchemaId,
    /// Ask for temperature-0 style decoding where the backend supports it.
    pub deterministic: bool,
    #[serde(skip, default = "default_deadline")]
    pub deadline: Duration,
}

fn default_deadline() -> Duration {
    DEFAULT_DEADLINE
}

impl ChatRequest {
    pub fn new(agent: impl Into<String>, output_schema: SchemaId) -> Self {
        Self {
            agent: agent.into(),
            messages: Vec::new(),
            output_schema,
            deterministic: true,
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn system(mut self, content: impl Into<String>) -> Self {
        self.messages.push(ChatMessage {
            role: Role::System,
            content: content.into(),
        });
        self
    }

    pub fn user(mut self, content: impl Into<String>) -> Self {
        self.messages.push(ChatMessage {
            role: Role::User,
            content: content.into(),
        });
        self
    }

    pub fn with_deadline(mut self, deadline: Duration) -> Self {
        self.deadline = deadline;
        self
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Inserts a system message just before the final user turn, so the
    /// prompt key stays stable across re-prompts.
    pub fn with_feedback(&self, feedback: &str) -> Self {
        let mut next = self.clone();
        let at = next
            .messages
            .iter()
            .rposition(|m| m.role == Role::User)
            .unwrap_or(next.messages.len());
        next.messages.insert(
            at,
            ChatMessage {
                role: Role::System,
                content: format!(
                    "Your previous output was rejected: {feedback}\nReturn corrected JSON only."
                ),
            },
        );
        next
    }

    pub fn prompt_key(&self) -> String {
        prompt_key(
            &self.agent,
            self.output_schema,
            self.last_user_message().unwrap_or_default(),
        )
    }

    fn validate(&self) -> Result<(), ProviderError> {
        if self.last_user_message().is_none() {
            return Err(ProviderError::InvalidRequest(
                "chat request has no user message".into(),
            ));
        }
        Ok(())
    }
}

/// Stable key the mock provider uses to look up scripted responses:
/// first 16 hex digits of SHA-256 over agent, schema id and the last user
/// message, separated by U+001F.
pub fn prompt_key(agent: &str, schema: SchemaId, last_user_message: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(agent.as_bytes());
    hasher.update([0x1f]);
    hasher.update(schema.as_str().as_bytes());
    hasher.update([0x1f]);
    hasher.update(last_user_message.as_bytes());
    hex::encode(hasher.finalize())[..16].to_string()
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Raw completion text for `request`. Callers go through [`chat`].
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn embedder_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Unit-normalized embedding of a non-empty text.
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;
}

/// A value a provider can be asked to produce.
pub trait StructuredOutput: DeserializeOwned {
    const SCHEMA: SchemaId;

    /// Invariants serde cannot express.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Raw completion bounded by the request deadline. Dropping the future
/// cancels the call.
pub async fn complete(
    provider: &dyn LlmProvider,
    request: &ChatRequest,
) -> Result<String, ProviderError> {
    request.validate()?;
    tokio::time::timeout(request.deadline, provider.complete(request))
        .await
        .map_err(|_| ProviderError::Timeout(request.deadline))?
}

/// One schema-validated chat call, bounded by the request deadline.
pub async fn chat<T: StructuredOutput>(
    provider: &dyn LlmProvider,
    request: &ChatRequest,
) -> Result<T, ChatError> {
    debug_assert_eq!(request.output_schema, T::SCHEMA);
    let raw = complete(provider, request).await?;
    parse_structured(&raw)
}

/// Parse and check `raw` as `T`. Markdown code fences around the JSON are
/// tolerated; anything else that is not the schema is a violation.
pub fn parse_structured<T: StructuredOutput>(raw: &str) -> Result<T, ChatError> {
    let violation = |message: String| ChatError::SchemaViolation {
        schema: T::SCHEMA,
        message,
        raw: raw.to_string(),
    };
    let value: T =
        serde_json::from_str(strip_code_fence(raw)).map_err(|e| violation(e.to_string()))?;
    value.check().map_err(violation)?;
    Ok(value)
}

/// Like [`chat`], re-prompting up to `retries` times on a schema violation
/// or provider error, with the failure appended as feedback.
pub async fn chat_with_retries<T: StructuredOutput>(
    provider: &dyn LlmProvider,
    request: &ChatRequest,
    retries: usize,
) -> Result<T, ChatError> {
    let mut attempt_request = request.clone();
    let mut attempt = 0;
    loop {
        match chat::<T>(provider, &attempt_request).await {
            Ok(value) => return Ok(value),
            Err(err) if attempt < retries => {
                tracing::debug!(agent = %request.agent, attempt, error = %err, "re-prompting");
                attempt_request = request.with_feedback(&err.to_string());
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

/// Strips a surrounding markdown code fence, if any.
pub fn strip_code_fence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let body = match rest.find('\n') {
        Some(newline) => &rest[newline + 1..],
        None => rest,
    };
    body.strip_suffix("```").unwrap_or(body).trim()
}

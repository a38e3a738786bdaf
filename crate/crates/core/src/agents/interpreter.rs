use serde::{Deserialize, Serialize};

use super::{ask, AgentError, Memory, Rejection};
use crate::llm_provider::{ChatRequest, LlmProvider, SchemaId, StructuredOutput};
use crate::prompts;

pub const INTERPRETER_AGENT: &str = "intent_interpreter";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntentResult {
    Clarified {
        clarified_intent: String,
    },
    NeedsClarification {
        clarification_question: String,
    },
    OffTopic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reply: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Clarified,
    NeedsClarification,
    OffTopic,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntent {
    kind: Kind,
    #[serde(default)]
    clarified_intent: Option<String>,
    #[serde(default)]
    clarification_question: Option<String>,
    #[serde(default)]
    reply: Option<String>,
}

impl StructuredOutput for RawIntent {
    const SCHEMA: SchemaId = SchemaId::IntentResult;

    fn check(&self) -> Result<(), String> {
        let present = |f: &Option<String>| f.as_deref().is_some_and(|s| !s.trim().is_empty());
        let (intent, question) = (
            present(&self.clarified_intent),
            present(&self.clarification_question),
        );
        match (self.kind, intent, question) {
            (Kind::Clarified, true, false)
            | (Kind::NeedsClarification, false, true)
            | (Kind::OffTopic, false, false) => Ok(()),
            _ => Err(format!(
                "kind {:?} requires exactly its own field: clarified_intent for clarified, \
                 clarification_question for needs_clarification, neither for off_topic",
                self.kind
            )),
        }
    }
}

impl From<RawIntent> for IntentResult {
    fn from(raw: RawIntent) -> Self {
        match raw.kind {
            Kind::Clarified => IntentResult::Clarified {
                clarified_intent: raw.clarified_intent.unwrap_or_default().trim().to_string(),
            },
            Kind::NeedsClarification => IntentResult::NeedsClarification {
                clarification_question: raw
                    .clarification_question
                    .unwrap_or_default()
                    .trim()
                    .to_string(),
            },
            Kind::OffTopic => IntentResult::OffTopic { reply: raw.reply },
        }
    }
}

/// Classify the engineer's message; a clarified result carries the intent
/// statement used for retrieval.
pub async fn interpret_intent(
    message: &str,
    memory: &Memory,
    provider: &dyn LlmProvider,
) -> Result<IntentResult, AgentError> {
    if message.trim().is_empty() {
        return Err(AgentError::EmptyInput("message"));
    }
    let system = prompts::render(
        prompts::INTENT_INTERPRETER,
        &[
            ("memory", &memory.render()),
            ("schema", SchemaId::IntentResult.json_schema()),
        ],
    );
    let request = ChatRequest::new(INTERPRETER_AGENT, SchemaId::IntentResult)
        .system(system)
        .user(message);
    ask(provider, &request, |raw: RawIntent| {
        Ok::<_, Rejection>(raw.into())
    })
    .await
}

//! Scripted provider for offline runs and tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    prompt_key, ChatRequest, Embedder, EmbeddingVector, HashEmbedder, LlmProvider, ProviderError,
    SchemaId,
};

/// A scripted reply. Strings are returned verbatim, JSON objects are
/// returned in compact serialized form, and a list is consumed one element
/// per call with the last element repeating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Text(String),
    Sequence(Vec<serde_json::Value>),
    Json(serde_json::Map<String, serde_json::Value>),
}

impl ScriptedResponse {
    fn at(&self, call: usize) -> String {
        match self {
            ScriptedResponse::Text(text) => text.clone(),
            ScriptedResponse::Json(map) => serde_json::Value::Object(map.clone()).to_string(),
            ScriptedResponse::Sequence(items) => {
                match items.get(call.min(items.len().saturating_sub(1))) {
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                    None => String::new(),
                }
            }
        }
    }
}

impl From<&str> for ScriptedResponse {
    fn from(text: &str) -> Self {
        ScriptedResponse::Text(text.to_string())
    }
}

impl From<serde_json::Value> for ScriptedResponse {
    fn from(value: serde_json::Value) -> Self {
        match value {
            serde_json::Value::String(s) => ScriptedResponse::Text(s),
            serde_json::Value::Object(map) => ScriptedResponse::Json(map),
            serde_json::Value::Array(items) => ScriptedResponse::Sequence(items),
            other => ScriptedResponse::Text(other.to_string()),
        }
    }
}

/// Readable script entry; its prompt key is computed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub agent: String,
    pub schema: SchemaId,
    pub message: String,
    pub response: ScriptedResponse,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    /// prompt key → response.
    #[serde(default)]
    pub responses: BTreeMap<String, ScriptedResponse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<ScriptEntry>,
    /// agent name → response used when no key matches.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub defaults: BTreeMap<String, ScriptedResponse>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Full(MockScript),
    Plain(BTreeMap<String, ScriptedResponse>),
}

impl MockScript {
    /// Accepts either the full form (`responses` / `entries` / `defaults`)
    /// or a bare object mapping prompt keys to responses.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(match serde_json::from_str::<ScriptFile>(text)? {
            ScriptFile::Full(script) => script,
            ScriptFile::Plain(responses) => MockScript {
                responses,
                ..Default::default()
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Transport(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| ProviderError::BadResponse(format!("{}: {e}", path.display())))
    }

    pub fn respond(
        &mut self,
        agent: &str,
        schema: SchemaId,
        message: &str,
        response: impl Into<ScriptedResponse>,
    ) -> &mut Self {
        self.responses
            .insert(prompt_key(agent, schema, message), response.into());
        self
    }

    pub fn default_for(&mut self, agent: &str, response: impl Into<ScriptedResponse>) -> &mut Self {
        self.defaults.insert(agent.to_string(), response.into());
        self
    }

    pub fn merge(&mut self, other: MockScript) {
        self.responses.extend(other.responses);
        self.entries.extend(other.entries);
        self.defaults.extend(other.defaults);
    }

    fn resolved(mut self) -> Self {
        for entry in std::mem::take(&mut self.entries) {
            self.responses.insert(
                prompt_key(&entry.agent, entry.schema, &entry.message),
                entry.response,
            );
        }
        self
    }
}

/// Deterministic chat provider backed by a [`MockScript`], with the hash
/// embedder for embeddings.
#[derive(Debug)]
pub struct MockProvider {
    name: String,
    script: MockScript,
    calls: Mutex<HashMap<String, usize>>,
    transcript: Mutex<Vec<String>>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        Self::named("mock", script)
    }

    pub fn named(name: impl Into<String>, script: MockScript) -> Self {
        Self {
            name: name.into(),
            script: script.resolved(),
            calls: Mutex::new(HashMap::new()),
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Prompt keys of every call served so far, in order.
    pub fn transcript(&self) -> Vec<String> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.transcript.lock().unwrap().len()
    }
}

#[async_trait]
impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let key = request.prompt_key();
        self.transcript.lock().unwrap().push(key.clone());
        let scripted = self
            .script
            .responses
            .get(&key)
            .or_else(|| self.script.defaults.get(&request.agent));
        let Some(response) = scripted else {
            return Err(ProviderError::Unscripted {
                key,
                agent: request.agent.clone(),
            });
        };
        let mut calls = self.calls.lock().unwrap();
        let n = calls.entry(key).or_insert(0);
        let text = response.at(*n);
        *n += 1;
        Ok(text)
    }
}

#[async_trait]
impl Embedder for MockProvider {
    fn embedder_id(&self) -> &str {
        HashEmbedder.embedder_id()
    }

    fn dim(&self) -> usize {
        HashEmbedder.dim()
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        HashEmbedder.embed_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn request(agent: &str, message: &str) -> ChatRequest {
        ChatRequest::new(agent, SchemaId::IntentResult).user(message)
    }

    #[tokio::test]
    async fn scripted_response_is_stable() {
        let mut script = MockScript::default();
        script.respond(
            "interpreter",
            SchemaId::IntentResult,
            "hello",
            "{\"kind\":\"off_topic\"}",
        );
        let provider = MockProvider::new(script);
        for _ in 0..3 {
            let out = provider
                .complete(&request("interpreter", "hello"))
                .await
                .unwrap();
            assert_eq!(out, "{\"kind\":\"off_topic\"}");
        }
    }

    #[tokio::test]
    async fn sequences_advance_then_repeat_last() {
        let mut script = MockScript::default();
        script.respond(
            "a",
            SchemaId::IntentResult,
            "m",
            json!(["bad", {"ok": true}]),
        );
        let provider = MockProvider::new(script);
        let req = request("a", "m");
        assert_eq!(provider.complete(&req).await.unwrap(), "bad");
        assert_eq!(provider.complete(&req).await.unwrap(), "{\"ok\":true}");
        assert_eq!(provider.complete(&req).await.unwrap(), "{\"ok\":true}");
        assert_eq!(provider.call_count(), 3);
    }

    #[tokio::test]
    async fn unscripted_falls_back_to_agent_default() {
        let mut script = MockScript::default();
        script.default_for("post_processor", json!({"revisions": []}));
        let provider = MockProvider::new(script);
        let out = provider
            .complete(&request("post_processor", "anything"))
            .await
            .unwrap();
        assert_eq!(out, "{\"revisions\":[]}");
        let err = provider
            .complete(&request("planner", "x"))
            .await
            .unwrap_err();
        assert!(matches!(err, ProviderError::Unscripted { .. }));
    }

    #[test]
    fn script_file_forms() {
        let key = prompt_key("interpreter", SchemaId::IntentResult, "hi");
        let plain = MockScript::from_json(&format!("{{\"{key}\": \"x\"}}")).unwrap();
        assert_eq!(plain.responses[&key], ScriptedResponse::Text("x".into()));

        let full = MockScript::from_json(
            r#"{"entries":[{"agent":"interpreter","schema":"intent_result.v1","message":"hi","response":{"kind":"off_topic"}}]}"#,
        )
        .unwrap();
        let resolved = full.resolved();
        assert!(resolved.responses.contains_key(&key));
    }
}

//! OpenAI-compatible chat-completions and embeddings client.

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    l2_normalize, ChatRequest, Embedder, EmbeddingVector, LlmProvider, ProviderError,
    DEFAULT_DEADLINE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_deadline_secs")]
    pub deadline_secs: u64,
}

fn default_deadline_secs() -> u64 {
    DEFAULT_DEADLINE.as_secs()
}

pub struct HttpProvider {
    client: reqwest::Client,
    config: HttpProviderConfig,
    api_key: Option<String>,
    embedder_id: String,
    name: String,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::InvalidRequest(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.deadline_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let embedder_id = format!(
            "http:{}",
            config.embedding_model.as_deref().unwrap_or(&config.model)
        );
        Ok(Self {
            client,
            name: format!("http:{}", config.model),
            embedder_id,
            config,
            api_key,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    async fn post(
        &self,
        path: &str,
        body: serde_json::Value,
    ) -> Result<serde_json::Value, ProviderError> {
        let mut builder = self.client.post(self.url(path)).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(Duration::from_secs(self.config.deadline_secs))
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response
            .text()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Transport(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::BadResponse(e.to_string()))
    }
}

#[async_trait]
impl LlmProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "response_format": {"type": "json_object"},
        });
        if request.deterministic {
            body["temperature"] = json!(0);
        }
        let reply = self.post("chat/completions", body).await?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::BadResponse("missing choices[0].message.content".into()))
    }
}

#[async_trait]
impl Embedder for HttpProvider {
    fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    fn dim(&self) -> usize {
        self.config.embedding_dim.unwrap_or(1536)
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::InvalidRequest(
                "cannot embed empty text".into(),
            ));
        }
        let model = self
            .config
            .embedding_model
            .as_deref()
            .unwrap_or(&self.config.model);
        let reply = self
            .post("embeddings", json!({"model": model, "input": text}))
            .await?;
        let raw = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| ProviderError::BadResponse("missing data[0].embedding".into()))?;
        let mut values = raw
            .iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| ProviderError::BadResponse("non-numeric embedding".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !l2_normalize(&mut values) {
            return Err(ProviderError::BadResponse("zero embedding vector".into()));
        }
        Ok(EmbeddingVector {
            values,
            embedder_id: self.embedder_id.clone(),
        })
    }
}

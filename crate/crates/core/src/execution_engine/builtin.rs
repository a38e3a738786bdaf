//! Demo plugins that exercise the loop without real infrastructure.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::registry::{PluginHandler, PluginInput, PluginOutput};

/// Which built-in backs a manifest loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HandlerSpec {
    Echo,
    HttpProbe {
        url: String,
    },
    ShellStub {
        #[serde(default)]
        commands: BTreeMap<String, StubReply>,
        #[serde(default)]
        default: Option<StubReply>,
    },
}

impl HandlerSpec {
    pub fn build(self) -> Arc<dyn PluginHandler> {
        match self {
            HandlerSpec::Echo => Arc::new(Echo),
            HandlerSpec::HttpProbe { url } => Arc::new(HttpProbe::new(url)),
            HandlerSpec::ShellStub { commands, default } => {
                Arc::new(ShellStub { commands, default })
            }
        }
    }
}

/// Returns the step's action text.
#[derive(Debug, Clone, Copy, Default)]
pub struct Echo;

#[async_trait]
impl PluginHandler for Echo {
    async fn invoke(&self, input: PluginInput) -> Result<PluginOutput, String> {
        Ok(PluginOutput {
            output: input.action,
            exit_status: 0,
        })
    }
}

/// GETs a URL and reports `status=<code>` followed by the start of the body.
/// `{name}` placeholders in the URL are filled from the step parameters,
/// `session_id` and `node_id`.
#[derive(Debug, Clone)]
pub struct HttpProbe {
    url_template: String,
    client: reqwest::Client,
}

const BODY_LIMIT: usize = 2048;

impl HttpProbe {
    pub fn new(url_template: impl Into<String>) -> Self {
        Self {
            url_template: url_template.into(),
            client: reqwest::Client::new(),
        }
    }

    fn url(&self, input: &PluginInput) -> String {
        let mut url = self.url_template.replace("{session_id}", &input.session_id);
        if let Some(node_id) = &input.node_id {
            url = url.replace("{node_id}", node_id);
        }
        for (name, value) in &input.params {
            url = url.replace(&format!("{{{name}}}"), value);
        }
        url
    }
}

#[async_trait]
impl PluginHandler for HttpProbe {
    async fn invoke(&self, input: PluginInput) -> Result<PluginOutput, String> {
        let url = self.url(&input);
        let response = self
            .client
            .get(&url)
            .send()
            .await
            .map_err(|e| format!("GET {url}: {e}"))?;
        let status = response.status();
        let body = response.text().await.unwrap_or_default();
        let mut cut = body.len().min(BODY_LIMIT);
        while !body.is_char_boundary(cut) {
            cut -= 1;
        }
        Ok(PluginOutput {
            output: format!("status={}\n{}", status.as_u16(), &body[..cut]),
            exit_status: if status.is_success() { 0 } else { 1 },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubReply {
    #[serde(default)]
    pub output: String,
    #[serde(default)]
    pub exit_status: i32,
    /// Fail with this diagnostic instead of producing output.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub delay_ms: Option<u64>,
}

/// Scripted command table keyed by the step's action text, with an
/// optional fallback reply. For tests only.
#[derive(Debug, Clone, Default)]
pub struct ShellStub {
    pub commands: BTreeMap<String, StubReply>,
    pub default: Option<StubReply>,
}

impl ShellStub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(mut self, action: impl Into<String>, output: impl Into<String>) -> Self {
        self.commands.insert(
            action.into(),
            StubReply {
                output: output.into(),
                ..Default::default()
            },
        );
        self
    }

    pub fn otherwise(mut self, reply: StubReply) -> Self {
        self.default = Some(reply);
        self
    }
}

#[async_trait]
impl PluginHandler for ShellStub {
    async fn invoke(&self, input: PluginInput) -> Result<PluginOutput, String> {
        let reply = self
            .commands
            .get(&input.action)
            .or(self.default.as_ref())
            .ok_or_else(|| format!("shell_stub: no scripted reply for `{}`", input.action))?;
        if let Some(ms) = reply.delay_ms {
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
        if let Some(error) = &reply.error {
            return Err(error.clone());
        }
        Ok(PluginOutput {
            output: reply.output.clone(),
            exit_status: reply.exit_status,
        })
    }
}

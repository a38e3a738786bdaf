use std::collections::HashSet;

use serde::Deserialize;

use super::{ask, AgentError, Rejection};
use crate::kb_compiler::KnowledgeNode;
use crate::kb_store::ScoredNode;
use crate::llm_provider::{ChatRequest, LlmProvider, SchemaId, StructuredOutput};
use crate::prompts;

pub const SELECTOR_AGENT: &str = "node_selector";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSelection {
    selected: Vec<String>,
    #[serde(default)]
    #[allow(dead_code)]
    reason: Option<String>,
}

impl StructuredOutput for NodeSelection {
    const SCHEMA: SchemaId = SchemaId::NodeSelection;
}

/// Keep the candidates the provider judges relevant, in retrieval order.
/// An empty result means the query is out of scope. Naming a node that was
/// not a candidate is a schema violation.
pub async fn select_nodes(
    clarified_intent: &str,
    candidates: &[ScoredNode],
    provider: &dyn LlmProvider,
) -> Result<Vec<KnowledgeNode>, AgentError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let listing: String = candidates
        .iter()
        .map(|c| {
            format!(
                "{} | {} | {}\n",
                c.node.node_id, c.node.intent, c.node.action
            )
        })
        .collect();
    let system = prompts::render(
        prompts::NODE_SELECTOR,
        &[
            ("candidates", listing.trim_end()),
            ("schema", SchemaId::NodeSelection.json_schema()),
        ],
    );
    let request = ChatRequest::new(SELECTOR_AGENT, SchemaId::NodeSelection)
        .system(system)
        .user(clarified_intent);
    ask(provider, &request, |selection: NodeSelection| {
        let chosen: HashSet<&str> = selection.selected.iter().map(String::as_str).collect();
        if let Some(stray) = chosen
            .iter()
            .find(|id| !candidates.iter().any(|c| c.node.node_id == **id))
        {
            return Err(Rejection::Retry(format!(
                "`{stray}` is not one of the candidate node ids"
            )));
        }
        Ok(candidates
            .iter()
            .filter(|c| chosen.contains(c.node.node_id.as_str()))
            .map(|c| c.node.clone())
            .collect())
    })
    .await
}

use serde::{Deserialize, Serialize};

use super::{ask, AgentError, Memory, Rejection};
use crate::execution_engine::PluginRegistry;
use crate::kb_compiler::KnowledgeNode;
use crate::llm_provider::{ChatRequest, LlmProvider, SchemaId, StructuredOutput};
use crate::prompts;

pub const PLANNER_AGENT: &str = "action_planner";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub step_index: usize,
    #[serde(default)]
    pub node_id: Option<String>,
    pub action: String,
    pub mode: StepMode,
    /// Present exactly when `mode` is auto.
    #[serde(default)]
    pub plugin: Option<String>,
    pub expected_outcomes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub steps: Vec<PlanStep>,
    pub rationale: String,
    pub source_nodes: Vec<String>,
    /// Whether the expert reviewed the plan.
    #[serde(default)]
    pub reviewed: bool,
}

impl ActionPlan {
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("plan has no steps".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.step_index != i {
                return Err(format!("step {i} carries index {}", step.step_index));
            }
            if (step.mode == StepMode::Auto) != step.plugin.is_some() {
                return Err(format!("step {i}: mode and plugin disagree"));
            }
            if let Some(node_id) = &step.node_id {
                if !self.source_nodes.contains(node_id) {
                    return Err(format!("step {i}: node {node_id} is not a source node"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    steps: Vec<RawStep>,
    #[serde(default)]
    rationale: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    #[serde(default)]
    node_id: Option<String>,
    action: String,
    #[serde(default)]
    #[allow(dead_code)]
    mode: Option<StepMode>,
    #[serde(default)]
    plugin: Option<String>,
    #[serde(default)]
    expected_outcomes: Option<Vec<String>>,
}

impl StructuredOutput for RawPlan {
    const SCHEMA: SchemaId = SchemaId::ActionPlan;

    fn check(&self) -> Result<(), String> {
        match self.steps.iter().position(|s| s.action.trim().is_empty()) {
            Some(i) => Err(format!("step {i} has an empty action")),
            None => Ok(()),
        }
    }
}

fn render_nodes(selected: &[KnowledgeNode]) -> String {
    let nodes: Vec<_> = selected
        .iter()
        .map(|n| {
            serde_json::json!({
                "node_id": n.node_id,
                "type": n.node_type,
                "intent": n.intent,
                "action": n.action,
                "outcomes": n.outcome_labels(),
                "executable_hint": n.executable_hint,
            })
        })
        .collect();
    serde_json::to_string_pretty(&nodes).expect("nodes serialize")
}

fn render_plugins(registry: &PluginRegistry) -> String {
    if registry.is_empty() {
        return "(none)".into();
    }
    registry
        .manifests()
        .map(|m| format!("- {}: {}", m.name, m.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Turn the selected nodes into an ordered plan. The model proposes modes
/// and plugins; the registry decides them: a step is auto exactly when its
/// plugin is registered, otherwise it is manual with no plugin. Steps
/// without expected outcomes inherit their node's outcome labels.
pub async fn plan_actions(
    selected: &[KnowledgeNode],
    memory: &Memory,
    registry: &PluginRegistry,
    provider: &dyn LlmProvider,
) -> Result<ActionPlan, AgentError> {
    if selected.is_empty() {
        return Err(AgentError::EmptyInput("selected nodes"));
    }
    let source_nodes: Vec<String> = selected.iter().map(|n| n.node_id.clone()).collect();
    let system = prompts::render(
        prompts::ACTION_PLANNER,
        &[
            ("nodes", &render_nodes(selected)),
            ("plugins", &render_plugins(registry)),
            ("memory", &memory.render()),
            ("schema", SchemaId::ActionPlan.json_schema()),
        ],
    );
    let request = ChatRequest::new(PLANNER_AGENT, SchemaId::ActionPlan)
        .system(system)
        .user(source_nodes.join("\n"));
    ask(provider, &request, |raw: RawPlan| {
        if raw.steps.is_empty() {
            return Err(Rejection::Fatal(AgentError::EmptyPlan));
        }
        let mut steps = Vec::with_capacity(raw.steps.len());
        for (step_index, step) in raw.steps.into_iter().enumerate() {
            let node = match &step.node_id {
                Some(id) => Some(selected.iter().find(|n| &n.node_id == id).ok_or_else(|| {
                    Rejection::Retry(format!(
                        "step {step_index} names node `{id}`, which was not selected"
                    ))
                })?),
                None => None,
            };
            let plugin = step.plugin.filter(|name| registry.contains(name));
            let expected_outcomes = match step.expected_outcomes {
                Some(outcomes) if !outcomes.is_empty() => outcomes,
                _ => node.map(|n| n.outcome_labels()).unwrap_or_default(),
            };
            steps.push(PlanStep {
                step_index,
                node_id: step.node_id,
                action: step.action.trim().to_string(),
                mode: if plugin.is_some() {
                    StepMode::Auto
                } else {
                    StepMode::Manual
                },
                plugin,
                expected_outcomes,
            });
        }
        let plan = ActionPlan {
            steps,
            rationale: raw.rationale.unwrap_or_default(),
            source_nodes: source_nodes.clone(),
            reviewed: false,
        };
        debug_assert_eq!(plan.check_invariants(), Ok(()));
        Ok(plan)
    })
    .await
}

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ask, ActionPlan, Rejection};
use crate::llm_provider::{ChatRequest, LlmProvider, SchemaId, StructuredOutput};
use crate::prompts;

pub const POST_PROCESSOR_AGENT: &str = "post_processor";

/// Text-level correction of one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRevision {
    pub step_index: usize,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub expected_outcomes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanReview {
    pub revisions: Vec<StepRevision>,
}

impl StructuredOutput for PlanReview {
    const SCHEMA: SchemaId = SchemaId::PlanReview;
}

impl PlanReview {
    fn apply(&self, plan: &ActionPlan) -> Result<ActionPlan, String> {
        let mut revised = plan.clone();
        let mut seen = HashSet::new();
        for revision in &self.revisions {
            let step = revised.steps.get_mut(revision.step_index).ok_or_else(|| {
                format!(
                    "revision targets step {}, which does not exist",
                    revision.step_index
                )
            })?;
            if !seen.insert(revision.step_index) {
                return Err(format!("step {} is revised twice", revision.step_index));
            }
            if let Some(action) = &revision.action {
                if action.trim().is_empty() {
                    return Err(format!(
                        "revision empties the action of step {}",
                        revision.step_index
                    ));
                }
                step.action = action.trim().to_string();
            }
            if let Some(outcomes) = &revision.expected_outcomes {
                step.expected_outcomes = outcomes.clone();
            }
        }
        revised.reviewed = true;
        Ok(revised)
    }
}

/// Let the expert correct action text and expected outcomes. Step count,
/// order, node provenance, modes and plugins cannot change. If the expert
/// fails or keeps answering out of contract, the plan is returned as it
/// came in, marked unreviewed.
pub async fn post_process(plan: &ActionPlan, expert: &dyn LlmProvider) -> ActionPlan {
    let mut unreviewed = plan.clone();
    unreviewed.reviewed = false;
    let plan_json = serde_json::to_string(&unreviewed).expect("plan serializes");
    let system = prompts::render(
        prompts::POST_PROCESSOR,
        &[
            ("plan", &plan_json),
            ("schema", SchemaId::PlanReview.json_schema()),
        ],
    );
    let request = ChatRequest::new(POST_PROCESSOR_AGENT, SchemaId::PlanReview)
        .system(system)
        .user(plan_json);
    match ask(expert, &request, |review: PlanReview| {
        review.apply(&unreviewed).map_err(Rejection::Retry)
    })
    .await
    {
        Ok(revised) => {
            debug_assert!(conserves(&unreviewed, &revised));
            revised
        }
        Err(err) => {
            tracing::warn!(error = %err, "plan review unavailable; passing plan through unreviewed");
            unreviewed
        }
    }
}

/// Everything but action text, expected outcomes and the review flag is
/// equal.
pub(crate) fn conserves(before: &ActionPlan, after: &ActionPlan) -> bool {
    before.steps.len() == after.steps.len()
        && before.source_nodes == after.source_nodes
        && before.steps.iter().zip(&after.steps).all(|(a, b)| {
            a.step_index == b.step_index
                && a.node_id == b.node_id
                && a.mode == b.mode
                && a.plugin == b.plugin
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{PlanStep, StepMode};
    use crate::llm_provider::{MockProvider, MockScript, ProviderError};
    use async_trait::async_trait;
    use serde_json::json;

    fn plan() -> ActionPlan {
        ActionPlan {
            steps: vec![
                PlanStep {
                    step_index: 0,
                    node_id: Some("a/S1".into()),
                    action: "Check replica lag".into(),
                    mode: StepMode::Auto,
                    plugin: Some("db_probe".into()),
                    expected_outcomes: vec!["lag high".into(), "lag normal".into()],
                },
                PlanStep {
                    step_index: 1,
                    node_id: Some("a/S2".into()),
                    action: "Fail over the db".into(),
                    mode: StepMode::Manual,
                    plugin: None,
                    expected_outcomes: vec!["failover completed".into()],
                },
            ],
            rationale: "latency".into(),
            source_nodes: vec!["a/S1".into(), "a/S2".into()],
            reviewed: false,
        }
    }

    fn expert(response: serde_json::Value) -> MockProvider {
        let mut script = MockScript::default();
        script.default_for(POST_PROCESSOR_AGENT, response);
        MockProvider::new(script)
    }

    #[tokio::test]
    async fn identity_expert_returns_plan_verbatim() {
        let out = post_process(&plan(), &expert(json!({"revisions": []}))).await;
        assert!(out.reviewed);
        assert_eq!(
            ActionPlan {
                reviewed: false,
                ..out
            },
            plan()
        );
    }

    #[tokio::test]
    async fn rewrite_changes_only_that_step() {
        let out = post_process(
            &plan(),
            &expert(json!({"revisions": [{"step_index": 1, "action": "Initiate a planned failover of the primary database"}]})),
        )
        .await;
        assert_eq!(out.steps[0], plan().steps[0]);
        assert_eq!(
            out.steps[1].action,
            "Initiate a planned failover of the primary database"
        );
        let mut expected = plan().steps[1].clone();
        expected.action = out.steps[1].action.clone();
        assert_eq!(out.steps[1], expected);
    }

    struct Unreachable;

    #[async_trait]
    impl LlmProvider for Unreachable {
        fn name(&self) -> &str {
            "unreachable"
        }

        async fn complete(&self, _: &ChatRequest) -> Result<String, ProviderError> {
            Err(ProviderError::Transport("connection refused".into()))
        }
    }

    #[tokio::test]
    async fn unreachable_expert_degrades() {
        let out = post_process(&plan(), &Unreachable).await;
        assert_eq!(out, plan());
        assert!(!out.reviewed);
    }

    #[tokio::test]
    async fn out_of_range_revision_degrades() {
        let out = post_process(
            &plan(),
            &expert(json!({"revisions": [{"step_index": 7, "action": "x"}]})),
        )
        .await;
        assert_eq!(out, plan());
    }

    #[tokio::test]
    async fn extra_fields_cannot_change_mode() {
        let out = post_process(
            &plan(),
            &expert(
                json!({"revisions": [{"step_index": 1, "mode": "auto", "plugin": "db_probe"}]}),
            ),
        )
        .await;
        assert_eq!(out, plan());
    }
}

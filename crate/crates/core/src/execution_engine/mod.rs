//! Running plan steps: auto steps through registered plugins, manual steps
//! by wrapping what the engineer reports. Either way the result is an
//! [`Insight`] whose outcome label steers the next round.

mod builtin;
mod registry;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{PlanStep, StepMode};
use crate::clock::Clock;

pub use builtin::{Echo, HandlerSpec, HttpProbe, ShellStub, StubReply};
pub use registry::{
    ManifestFile, OutcomePattern, ParamSpec, Plugin, PluginHandler, PluginInput, PluginManifest,
    PluginOutput, PluginRegistry, RegistryError, DEFAULT_PLUGIN_DEADLINE,
};

/// Outcome label for results that match none of the expected outcomes.
pub const UNMATCHED: &str = "unmatched";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsightSource {
    Plugin { name: String },
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub step_index: usize,
    #[serde(default)]
    pub node_id: Option<String>,
    pub source: InsightSource,
    /// One of the step's expected outcomes, or [`UNMATCHED`].
    pub outcome_label: String,
    pub raw_output: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub produced_at: DateTime<Utc>,
}

impl Insight {
    pub fn is_matched(&self) -> bool {
        self.outcome_label != UNMATCHED
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("step {step_index} is manual and cannot be executed by a plugin")]
    NotAutomatable { step_index: usize },
    #[error("plugin `{0}` is not registered")]
    PluginNotFound(String),
}

/// Session-level inputs for plugin handlers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepContext {
    pub session_id: String,
    pub params: BTreeMap<String, String>,
}

/// Run an auto step's plugin within its deadline. Handler failures, panics
/// and timeouts come back as an unmatched insight carrying a diagnostic.
pub async fn execute_step(
    step: &PlanStep,
    context: &StepContext,
    registry: &PluginRegistry,
    clock: &dyn Clock,
) -> Result<Insight, ExecError> {
    let name = match (&step.mode, &step.plugin) {
        (StepMode::Auto, Some(name)) => name,
        _ => {
            return Err(ExecError::NotAutomatable {
                step_index: step.step_index,
            })
        }
    };
    let plugin = registry
        .get(name)
        .ok_or_else(|| ExecError::PluginNotFound(name.clone()))?;
    let input = PluginInput {
        session_id: context.session_id.clone(),
        step_index: step.step_index,
        node_id: step.node_id.clone(),
        action: step.action.clone(),
        params: context.params.clone(),
    };
    let deadline = plugin.manifest.deadline();
    let handler = plugin.handler.clone();
    let mut task = tokio::spawn(async move { handler.invoke(input).await });
    let result = match tokio::time::timeout(deadline, &mut task).await {
        Ok(Ok(result)) => result,
        Ok(Err(join)) => Err(format!("plugin task failed: {join}")),
        Err(_) => {
            task.abort();
            Err(format!("timed out after {} ms", deadline.as_millis()))
        }
    };
    let source = InsightSource::Plugin { name: name.clone() };
    let insight = match result {
        Ok(out) => {
            let label = plugin
                .manifest
                .match_outcome(&out.output)
                .filter(|label| step.expected_outcomes.iter().any(|e| e == label))
                .unwrap_or(UNMATCHED)
                .to_string();
            let first_line = out.output.lines().next().unwrap_or("").trim();
            Insight {
                step_index: step.step_index,
                node_id: step.node_id.clone(),
                source,
                summary: format!("{name} reported {label}: {first_line}"),
                outcome_label: label,
                raw_output: out.output,
                exit_status: Some(out.exit_status),
                diagnostic: None,
                produced_at: clock.now(),
            }
        }
        Err(diagnostic) => Insight {
            step_index: step.step_index,
            node_id: step.node_id.clone(),
            source,
            outcome_label: UNMATCHED.into(),
            summary: format!("{name} failed: {diagnostic}"),
            raw_output: diagnostic.clone(),
            exit_status: None,
            diagnostic: Some(diagnostic),
            produced_at: clock.now(),
        },
    };
    Ok(insight)
}

/// Lowercase and collapse whitespace runs to single spaces.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Wrap an engineer's report as an insight. The outcome is the longest
/// expected outcome contained in the report after normalization (the
/// earliest listed on ties), else [`UNMATCHED`].
pub fn ingest_manual_result(step: &PlanStep, text: &str, clock: &dyn Clock) -> Insight {
    let report = normalize_text(text);
    let label = step
        .expected_outcomes
        .iter()
        .map(|label| (label, normalize_text(label)))
        .filter(|(_, norm)| !norm.is_empty() && report.contains(norm.as_str()))
        .fold(None::<(&String, usize)>, |best, (label, norm)| match best {
            Some((_, len)) if len >= norm.len() => best,
            _ => Some((label, norm.len())),
        })
        .map_or_else(|| UNMATCHED.to_string(), |(label, _)| label.clone());
    Insight {
        step_index: step.step_index,
        node_id: step.node_id.clone(),
        source: InsightSource::Manual,
        outcome_label: label,
        raw_output: text.to_string(),
        summary: text.trim().to_string(),
        exit_status: None,
        diagnostic: None,
        produced_at: clock.now(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use async_trait::async_trait;

    fn step(mode: StepMode, plugin: Option<&str>, expected: &[&str]) -> PlanStep {
        PlanStep {
            step_index: 0,
            node_id: Some("linear_chain/S1".into()),
            action: "probe the frontend".into(),
            mode,
            plugin: plugin.map(String::from),
            expected_outcomes: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn registry_with(plugin: Plugin) -> PluginRegistry {
        let mut registry = PluginRegistry::new();
        registry.register(plugin).unwrap();
        registry
    }

    fn health_manifest() -> PluginManifest {
        PluginManifest::new("run_health_probe", "probe the frontend pool")
            .with_pattern("status=healthy", "healthy")
            .with_pattern("status=degraded", "degraded")
    }

    #[test]
    fn register_rejects_duplicates() {
        let mut registry = PluginRegistry::new();
        registry
            .register(Plugin::new(health_manifest(), Echo))
            .unwrap();
        assert_eq!(registry.len(), 1);
        assert!(matches!(
            registry.register(Plugin::new(health_manifest(), Echo)),
            Err(RegistryError::DuplicatePlugin(name)) if name == "run_health_probe"
        ));
    }

    #[tokio::test]
    async fn stub_output_maps_to_outcome() {
        let registry = registry_with(Plugin::new(
            health_manifest(),
            ShellStub::new().on("probe the frontend", "status=healthy\nall 4 nodes ok"),
        ));
        let insight = execute_step(
            &step(
                StepMode::Auto,
                Some("run_health_probe"),
                &["healthy", "degraded"],
            ),
            &StepContext::default(),
            &registry,
            &LogicalClock::default(),
        )
        .await
        .unwrap();
        assert_eq!(insight.outcome_label, "healthy");
        assert_eq!(insight.exit_status, Some(0));
        assert_eq!(
            insight.source,
            InsightSource::Plugin {
                name: "run_health_probe".into()
            }
        );
    }

    #[tokio::test]
    async fn matched_label_outside_expected_is_unmatched() {
        let registry = registry_with(Plugin::new(
            health_manifest(),
            ShellStub::new().on("probe the frontend", "status=degraded"),
        ));
        let insight = execute_step(
            &step(StepMode::Auto, Some("run_health_probe"), &["healthy"]),
            &StepContext::default(),
            &registry,
            &LogicalClock::default(),
        )
        .await
        .unwrap();
        assert_eq!(insight.outcome_label, UNMATCHED);
    }

    #[tokio::test]
    async fn handler_error_is_data() {
        let stub = ShellStub::new().otherwise(StubReply {
            error: Some("connection refused".into()),
            ..Default::default()
        });
        let registry = registry_with(Plugin::new(health_manifest(), stub));
        let insight = execute_step(
            &step(StepMode::Auto, Some("run_health_probe"), &["healthy"]),
            &StepContext::default(),
            &registry,
            &LogicalClock::default(),
        )
        .await
        .unwrap();
        assert_eq!(insight.outcome_label, UNMATCHED);
        assert!(insight.raw_output.contains("connection refused"));
        assert!(insight.diagnostic.is_some());
    }

    struct Panics;

    #[async_trait]
    impl PluginHandler for Panics {
        async fn invoke(&self, _: PluginInput) -> Result<PluginOutput, String> {
            panic!("handler bug")
        }
    }

    #[tokio::test]
    async fn handler_panic_is_data() {
        let registry = registry_with(Plugin::new(health_manifest(), Panics));
        let insight = execute_step(
            &step(StepMode::Auto, Some("run_health_probe"), &["healthy"]),
            &StepContext::default(),
            &registry,
            &LogicalClock::default(),
        )
        .await
        .unwrap();
        assert_eq!(insight.outcome_label, UNMATCHED);
        assert!(insight.diagnostic.unwrap().contains("panic"));
    }

    #[tokio::test(start_paused = true)]
    async fn timeout_is_reported_in_insight() {
        let mut manifest = health_manifest();
        manifest.deadline_ms = Some(50);
        let stub = ShellStub::new().otherwise(StubReply {
            output: "status=healthy".into(),
            delay_ms: Some(60_000),
            ..Default::default()
        });
        let registry = registry_with(Plugin::new(manifest, stub));
        let insight = execute_step(
            &step(StepMode::Auto, Some("run_health_probe"), &["healthy"]),
            &StepContext::default(),
            &registry,
            &LogicalClock::default(),
        )
        .await
        .unwrap();
        assert_eq!(insight.outcome_label, UNMATCHED);
        assert!(insight.diagnostic.unwrap().contains("timed out"));
    }

    #[tokio::test]
    async fn manual_or_unknown_plugin_is_an_error() {
        let registry = PluginRegistry::new();
        let clock = LogicalClock::default();
        assert_eq!(
            execute_step(
                &step(StepMode::Manual, None, &[]),
                &StepContext::default(),
                &registry,
                &clock
            )
            .await,
            Err(ExecError::NotAutomatable { step_index: 0 })
        );
        assert_eq!(
            execute_step(
                &step(StepMode::Auto, Some("gone"), &[]),
                &StepContext::default(),
                &registry,
                &clock
            )
            .await,
            Err(ExecError::PluginNotFound("gone".into()))
        );
    }

    #[test]
    fn manual_results_match_by_containment() {
        let clock = LogicalClock::default();
        let s = step(
            StepMode::Manual,
            None,
            &["failover completed", "failover blocked"],
        );
        assert_eq!(
            ingest_manual_result(&s, "failover completed", &clock).outcome_label,
            "failover completed"
        );
        assert_eq!(
            ingest_manual_result(&s, "  The FAILOVER\n completed at 10:02", &clock).outcome_label,
            "failover completed"
        );
        assert_eq!(
            ingest_manual_result(&s, "rebooted the box", &clock).outcome_label,
            UNMATCHED
        );
        let empty = ingest_manual_result(&s, "", &clock);
        assert_eq!(empty.outcome_label, UNMATCHED);
        assert_eq!(empty.raw_output, "");
        assert_eq!(empty.source, InsightSource::Manual);
    }

    #[test]
    fn longest_contained_label_wins() {
        let s = step(StepMode::Manual, None, &["done", "done with errors"]);
        let insight =
            ingest_manual_result(&s, "Done with errors on node 3", &LogicalClock::default());
        assert_eq!(insight.outcome_label, "done with errors");
    }

    #[test]
    fn manifest_file_builds_builtin_plugins() {
        let mut registry = PluginRegistry::new();
        let n = registry
            .register_manifest_json(
                "inline",
                r#"[
                    {"name": "echo", "description": "returns its input", "handler": {"type": "echo"}},
                    {"name": "db_probe", "outcome_patterns": [{"pattern": "lag=high", "outcome_label": "lag high"}],
                     "handler": {"type": "shell_stub", "default": {"output": "lag=high"}}},
                    {"name": "probe", "handler": {"type": "http_probe", "url": "http://127.0.0.1:9/{session_id}"}}
                ]"#,
            )
            .unwrap();
        assert_eq!(n, 3);
        assert!(registry.contains("db_probe"));
        assert!(registry
            .register_manifest_json("bad", r#"{"name": "x"}"#)
            .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn manual_outcome_is_expected_or_unmatched(
                text in ".{0,40}",
                expected in proptest::collection::vec("[a-c ]{1,6}", 0..4),
            ) {
                let mut s = step(StepMode::Manual, None, &[]);
                s.expected_outcomes = expected.clone();
                let insight = ingest_manual_result(&s, &text, &LogicalClock::default());
                prop_assert!(insight.outcome_label == UNMATCHED || expected.contains(&insight.outcome_label));
            }
        }
    }
}

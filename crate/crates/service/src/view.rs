//! The client-facing projection of a session, computed from its event log
//! alone.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use mitigraph_core::orchestrator::{replay, CorruptLog, Escalation, EventPayload, Transition};
use mitigraph_core::{ActionPlan, SessionEvent, SessionState, StepMode};
use serde::{Deserialize, Serialize};

/// Version of every JSON body this service emits.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// The on-call engineer.
    Oce,
    Copilot,
    Plugin,
    System,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    /// The next auto step while the session is executing.
    Running,
    Done,
    AwaitingHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub step_index: usize,
    pub node_id: Option<String>,
    pub action: String,
    pub mode: StepMode,
    pub plugin: Option<String>,
    pub expected_outcomes: Vec<String>,
    pub status: StepStatus,
    /// Outcome observed for a finished step.
    pub outcome_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanView {
    pub rationale: String,
    pub reviewed: bool,
    pub source_nodes: Vec<String>,
    pub steps: Vec<StepView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingAction {
    pub step_index: usize,
    pub node_id: Option<String>,
    pub action: String,
    pub expected_outcomes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionView {
    pub node_id: Option<String>,
    pub outcome_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSessionView {
    pub schema_version: u32,
    pub session_id: String,
    pub state: SessionState,
    pub last_seq: u64,
    pub iteration_count: u32,
    pub max_iterations: u32,
    pub transcript: Vec<TranscriptEntry>,
    pub plan: Option<PlanView>,
    pub pending_manual_action: Option<PendingAction>,
    pub pending_question: Option<String>,
    pub escalation: Option<Escalation>,
    pub resolution: Option<ResolutionView>,
    pub diagnostic: Option<String>,
    pub created_at: Option<DateTime<Utc>>,
    pub updated_at: Option<DateTime<Utc>>,
}

impl ApiSessionView {
    pub fn from_events(events: &[SessionEvent]) -> Result<Self, CorruptLog> {
        let session = replay(events)?;
        let mut transcript = Vec::new();
        let mut outcomes: BTreeMap<usize, String> = BTreeMap::new();
        let mut resolution = None;
        for event in events {
            let mut say = |role, text: String| {
                transcript.push(TranscriptEntry {
                    seq: event.seq,
                    role,
                    text,
                    timestamp: event.at,
                })
            };
            match &event.payload {
                EventPayload::UserMessage { text } => say(Role::Oce, text.clone()),
                EventPayload::ManualResult { insight } => {
                    outcomes.insert(insight.step_index, insight.outcome_label.clone());
                    say(Role::Oce, insight.raw_output.clone());
                }
                EventPayload::AutoInsight { insight } => {
                    outcomes.insert(insight.step_index, insight.outcome_label.clone());
                    say(Role::Plugin, insight.summary.clone());
                }
                EventPayload::StateChange { transition, .. } => match transition {
                    Transition::Redirected { reply } => say(Role::Copilot, reply.clone()),
                    Transition::ClarificationRequested { question } => {
                        say(Role::Copilot, question.clone())
                    }
                    Transition::PlanReady { plan } => {
                        outcomes.clear();
                        say(Role::Copilot, describe_plan(plan));
                    }
                    Transition::Failed { diagnostic } => {
                        say(Role::System, format!("Session failed: {diagnostic}"))
                    }
                    _ => {}
                },
                EventPayload::Escalation { reason, detail, .. } => {
                    let reason = serde_json::to_value(reason).expect("reason serializes");
                    say(
                        Role::Copilot,
                        format!(
                            "Escalating to the on-call team ({}): {detail}",
                            reason.as_str().unwrap_or("")
                        ),
                    )
                }
                EventPayload::Resolution {
                    node_id,
                    outcome_label,
                } => {
                    resolution = Some(ResolutionView {
                        node_id: node_id.clone(),
                        outcome_label: outcome_label.clone(),
                    });
                    say(
                        Role::Copilot,
                        format!("Mitigation complete: {outcome_label}"),
                    );
                }
            }
        }

        let plan = session.current_plan.as_ref().map(|plan| PlanView {
            rationale: plan.rationale.clone(),
            reviewed: plan.reviewed,
            source_nodes: plan.source_nodes.clone(),
            steps: plan
                .steps
                .iter()
                .map(|step| {
                    let i = step.step_index;
                    let status = if i < session.cursor {
                        StepStatus::Done
                    } else if i > session.cursor {
                        StepStatus::Pending
                    } else {
                        match session.state {
                            SessionState::AwaitingManualResult => StepStatus::AwaitingHuman,
                            SessionState::ExecutingAuto => StepStatus::Running,
                            _ => StepStatus::Pending,
                        }
                    };
                    StepView {
                        step_index: i,
                        node_id: step.node_id.clone(),
                        action: step.action.clone(),
                        mode: step.mode,
                        plugin: step.plugin.clone(),
                        expected_outcomes: step.expected_outcomes.clone(),
                        status,
                        outcome_label: if status == StepStatus::Done {
                            outcomes.get(&i).cloned()
                        } else {
                            None
                        },
                    }
                })
                .collect(),
        });
        let pending_manual_action = (session.state == SessionState::AwaitingManualResult)
            .then(|| session.current_step())
            .flatten()
            .map(|step| PendingAction {
                step_index: step.step_index,
                node_id: step.node_id.clone(),
                action: step.action.clone(),
                expected_outcomes: step.expected_outcomes.clone(),
            });

        Ok(ApiSessionView {
            schema_version: SCHEMA_VERSION,
            session_id: session.session_id,
            state: session.state,
            last_seq: session.last_seq,
            iteration_count: session.iteration_count,
            max_iterations: session.max_iterations,
            transcript,
            plan,
            pending_manual_action,
            pending_question: session.pending_question,
            escalation: session.escalation,
            resolution,
            diagnostic: session.diagnostic,
            created_at: session.created_at,
            updated_at: session.updated_at,
        })
    }

    pub fn done_steps(&self) -> usize {
        self.plan.as_ref().map_or(0, |p| {
            p.steps
                .iter()
                .filter(|s| s.status == StepStatus::Done)
                .count()
        })
    }
}

fn describe_plan(plan: &ActionPlan) -> String {
    let mut text = String::from("Plan:");
    for step in &plan.steps {
        let how = match (step.mode, &step.plugin) {
            (StepMode::Auto, Some(plugin)) => format!("auto via {plugin}"),
            _ => "manual".to_string(),
        };
        text.push_str(&format!(
            "\n{}. {} [{how}]",
            step.step_index + 1,
            step.action
        ));
    }
    text
}

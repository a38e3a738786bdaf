//! Session state and its event log. The engine and [`replay`] share
//! [`MitigationSession::apply`], so a replayed log always reproduces the
//! live session.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::agents::{ActionPlan, Memory, StepMode, Turn, TurnRole};
use crate::execution_engine::{Insight, UNMATCHED};
use crate::kb_compiler::KnowledgeNode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    #[default]
    AwaitingMessage,
    Clarifying,
    Retrieving,
    Planning,
    ExecutingAuto,
    AwaitingManualResult,
    Escalated,
    Resolved,
    Failed,
}

impl SessionState {
    pub fn is_absorbing(self) -> bool {
        matches!(
            self,
            SessionState::Escalated | SessionState::Resolved | SessionState::Failed
        )
    }

    /// States that wait for the engineer rather than for `advance`.
    pub fn needs_human(self) -> bool {
        matches!(
            self,
            SessionState::AwaitingMessage
                | SessionState::Clarifying
                | SessionState::AwaitingManualResult
        )
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    /// No retrieved node was relevant, or the knowledge base is empty.
    OutOfScope,
    EmptyPlan,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node_id: String,
    pub score: f64,
}

/// Where a continuation query came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ContinuationSource {
    Linker {
        node_id: String,
        outcome_label: String,
        #[serde(default)]
        target: Option<String>,
    },
    Insight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Transition {
    Started {
        max_iterations: u32,
    },
    /// Off-topic message; the state does not change.
    Redirected {
        reply: String,
    },
    ClarificationRequested {
        question: String,
    },
    IntentClarified {
        intent: String,
    },
    NodesSelected {
        query: String,
        candidates: Vec<Candidate>,
        selected: Vec<KnowledgeNode>,
    },
    PlanReady {
        plan: ActionPlan,
    },
    Continue {
        query: String,
        iteration_count: u32,
        via: ContinuationSource,
    },
    Failed {
        diagnostic: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    UserMessage {
        text: String,
    },
    ManualResult {
        insight: Insight,
    },
    AutoInsight {
        insight: Insight,
    },
    StateChange {
        from: SessionState,
        to: SessionState,
        transition: Transition,
    },
    Escalation {
        reason: EscalationReason,
        detail: String,
        iteration_count: u32,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        candidates: Vec<Candidate>,
    },
    Resolution {
        node_id: Option<String>,
        outcome_label: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub session_id: String,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// Conversation turns, every plan and every insight, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMemory {
    pub turns: Vec<Turn>,
    pub plans: Vec<ActionPlan>,
    pub insights: Vec<Insight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub reason: EscalationReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MitigationSession {
    pub session_id: String,
    pub state: SessionState,
    pub memory: SessionMemory,
    pub current_plan: Option<ActionPlan>,
    /// Index of the next plan step to run.
    pub cursor: usize,
    pub iteration_count: u32,
    pub max_iterations: u32,
    pub clarified_intent: Option<String>,
    /// Query for the next retrieval.
    pub query: Option<String>,
    pub selection: Vec<KnowledgeNode>,
    pub pending_question: Option<String>,
    pub escalation: Option<Escalation>,
    pub diagnostic: Option<String>,
    pub last_seq: u64,
    pub created_at: Option<DateTime<Utc>>,
    pub updated_at: Option<DateTime<Utc>>,
}

impl MitigationSession {
    /// The agents' view of this session.
    pub fn agent_memory(&self) -> Memory {
        Memory::new(&self.memory.turns, &self.memory.insights)
    }

    /// The plan step waiting to run or to be reported on.
    pub fn current_step(&self) -> Option<&crate::agents::PlanStep> {
        self.current_plan.as_ref()?.steps.get(self.cursor)
    }

    pub fn plan_exhausted(&self) -> bool {
        self.current_plan
            .as_ref()
            .is_some_and(|p| self.cursor >= p.steps.len())
    }

    /// State after an insight moved the cursor: the next step's mode
    /// decides, and an exhausted plan waits in ExecutingAuto for the
    /// continuation decision.
    fn state_after_step(&self) -> SessionState {
        match self.current_step() {
            Some(step) if step.mode == StepMode::Manual => SessionState::AwaitingManualResult,
            _ => SessionState::ExecutingAuto,
        }
    }

    /// Fold one event into the session. Fails without modifying anything
    /// when the event does not follow from the current state.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), String> {
        let mut next = self.clone();
        next.apply_in_place(event)?;
        next.check_invariants()?;
        *self = next;
        Ok(())
    }

    fn apply_in_place(&mut self, event: &SessionEvent) -> Result<(), String> {
        if event.seq != self.last_seq + 1 {
            return Err(format!(
                "expected sequence number {}, found {}",
                self.last_seq + 1,
                event.seq
            ));
        }
        if self.last_seq > 0 && event.session_id != self.session_id {
            return Err(format!("event belongs to session {}", event.session_id));
        }
        if self.state.is_absorbing() {
            return Err(format!("session is {} and accepts no events", self.state));
        }
        let started = matches!(
            event.payload,
            EventPayload::StateChange {
                transition: Transition::Started { .. },
                ..
            }
        );
        if (self.last_seq == 0) != started {
            return Err("a log starts with exactly one started transition".into());
        }
        match &event.payload {
            EventPayload::UserMessage { text } => {
                self.expect_state(&[SessionState::AwaitingMessage, SessionState::Clarifying])?;
                self.memory.turns.push(Turn {
                    role: TurnRole::User,
                    text: text.clone(),
                    at: event.at,
                });
            }
            EventPayload::AutoInsight { insight } => {
                self.expect_state(&[SessionState::ExecutingAuto])?;
                self.take_insight(insight, StepMode::Auto)?;
            }
            EventPayload::ManualResult { insight } => {
                self.expect_state(&[SessionState::AwaitingManualResult])?;
                self.take_insight(insight, StepMode::Manual)?;
            }
            EventPayload::StateChange {
                from,
                to,
                transition,
            } => {
                if *from != self.state {
                    return Err(format!(
                        "transition from {from} recorded while {}",
                        self.state
                    ));
                }
                let target = self.transition(transition, event)?;
                if target != *to {
                    return Err(format!("transition leads to {target}, log says {to}"));
                }
                self.state = target;
            }
            EventPayload::Escalation {
                reason,
                detail,
                iteration_count,
                ..
            } => {
                match reason {
                    EscalationReason::OutOfScope => {
                        self.expect_state(&[SessionState::Retrieving])?
                    }
                    EscalationReason::EmptyPlan => self.expect_state(&[SessionState::Planning])?,
                    EscalationReason::BudgetExhausted => {
                        self.expect_exhausted_plan()?;
                        if *iteration_count != self.iteration_count + 1
                            || *iteration_count != self.max_iterations
                        {
                            return Err(
                                "budget escalation must happen on reaching max_iterations".into()
                            );
                        }
                    }
                }
                self.iteration_count = *iteration_count;
                self.escalation = Some(Escalation {
                    reason: *reason,
                    detail: detail.clone(),
                });
                self.state = SessionState::Escalated;
            }
            EventPayload::Resolution { .. } => {
                self.expect_exhausted_plan()?;
                self.state = SessionState::Resolved;
            }
        }
        self.last_seq = event.seq;
        self.updated_at = Some(event.at);
        Ok(())
    }

    fn transition(
        &mut self,
        transition: &Transition,
        event: &SessionEvent,
    ) -> Result<SessionState, String> {
        use SessionState::*;
        Ok(match transition {
            Transition::Started { max_iterations } => {
                self.session_id = event.session_id.clone();
                self.max_iterations = *max_iterations;
                self.created_at = Some(event.at);
                AwaitingMessage
            }
            Transition::Redirected { reply } => {
                self.expect_state(&[AwaitingMessage, Clarifying])?;
                self.push_assistant(reply, event.at);
                self.state
            }
            Transition::ClarificationRequested { question } => {
                self.expect_state(&[AwaitingMessage, Clarifying])?;
                self.pending_question = Some(question.clone());
                self.push_assistant(question, event.at);
                Clarifying
            }
            Transition::IntentClarified { intent } => {
                self.expect_state(&[AwaitingMessage, Clarifying])?;
                self.pending_question = None;
                self.clarified_intent = Some(intent.clone());
                self.query = Some(intent.clone());
                Retrieving
            }
            Transition::NodesSelected { selected, .. } => {
                self.expect_state(&[Retrieving])?;
                if selected.is_empty() {
                    return Err("an empty selection escalates instead".into());
                }
                self.selection = selected.clone();
                Planning
            }
            Transition::PlanReady { plan } => {
                self.expect_state(&[Planning])?;
                plan.check_invariants()?;
                if plan
                    .source_nodes
                    .iter()
                    .any(|id| !self.selection.iter().any(|n| &n.node_id == id))
                {
                    return Err("plan uses nodes outside the selection".into());
                }
                self.memory.plans.push(plan.clone());
                self.current_plan = Some(plan.clone());
                self.cursor = 0;
                self.state_after_step()
            }
            Transition::Continue {
                query,
                iteration_count,
                ..
            } => {
                self.expect_exhausted_plan()?;
                if *iteration_count != self.iteration_count + 1
                    || *iteration_count >= self.max_iterations
                {
                    return Err(format!(
                        "iteration {iteration_count} does not follow {}",
                        self.iteration_count
                    ));
                }
                self.iteration_count = *iteration_count;
                self.query = Some(query.clone());
                self.current_plan = None;
                self.cursor = 0;
                self.selection.clear();
                Retrieving
            }
            Transition::Failed { diagnostic } => {
                self.diagnostic = Some(diagnostic.clone());
                Failed
            }
        })
    }

    fn take_insight(&mut self, insight: &Insight, mode: StepMode) -> Result<(), String> {
        let step = self.current_step().ok_or("no plan step is pending")?;
        if step.mode != mode {
            return Err(format!("step {} is not {mode:?}", step.step_index));
        }
        if insight.step_index != step.step_index {
            return Err(format!(
                "insight for step {} while step {} is pending",
                insight.step_index, step.step_index
            ));
        }
        if insight.outcome_label != UNMATCHED
            && !step.expected_outcomes.contains(&insight.outcome_label)
        {
            return Err(format!(
                "outcome `{}` is not expected by the step",
                insight.outcome_label
            ));
        }
        self.memory.insights.push(insight.clone());
        self.cursor += 1;
        self.state = self.state_after_step();
        Ok(())
    }

    fn push_assistant(&mut self, text: &str, at: DateTime<Utc>) {
        self.memory.turns.push(Turn {
            role: TurnRole::Assistant,
            text: text.to_string(),
            at,
        });
    }

    fn expect_state(&self, allowed: &[SessionState]) -> Result<(), String> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(format!("not allowed in state {}", self.state))
        }
    }

    fn expect_exhausted_plan(&self) -> Result<(), String> {
        self.expect_state(&[SessionState::ExecutingAuto])?;
        if !self.plan_exhausted() {
            return Err("plan still has steps to run".into());
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        use SessionState::*;
        if self.iteration_count > self.max_iterations {
            return Err("iteration budget exceeded".into());
        }
        match self.state {
            AwaitingManualResult => {
                if self.current_step().map(|s| s.mode) != Some(StepMode::Manual) {
                    return Err(
                        "awaiting a manual result without a manual step at the cursor".into(),
                    );
                }
            }
            ExecutingAuto => {
                if self.current_plan.is_none() {
                    return Err("executing without a plan".into());
                }
                if self
                    .current_step()
                    .is_some_and(|s| s.mode != StepMode::Auto)
                {
                    return Err("executing a manual step".into());
                }
            }
            _ => {}
        }
        if matches!(self.state, ExecutingAuto | AwaitingManualResult) && self.selection.is_empty() {
            return Err("plan without a node selection".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corrupt event log at sequence {seq}: {message}")]
pub struct CorruptLog {
    pub seq: u64,
    pub message: String,
}

/// Rebuild a session from its event log. An empty log yields a fresh
/// session.
pub fn replay(events: &[SessionEvent]) -> Result<MitigationSession, CorruptLog> {
    let mut session = MitigationSession::default();
    for event in events {
        session.apply(event).map_err(|message| CorruptLog {
            seq: event.seq,
            message,
        })?;
    }
    Ok(session)
}

/// One event per line, newline-terminated.
pub fn to_jsonl(events: &[SessionEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
        .collect()
}

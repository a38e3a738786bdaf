use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::watch;

use super::log::{EventLog, MemoryLog};
use super::session::{
    replay, Candidate, ContinuationSource, EscalationReason, EventPayload, MitigationSession,
    SessionEvent, SessionState, Transition,
};
use super::{OrchestratorConfig, OrchestratorError};
use crate::agents::{self, AgentError, IntentResult};
use crate::clock::{Clock, IdGenerator, RandomIds, SystemClock};
use crate::execution_engine::{self, PluginRegistry, StepContext};
use crate::kb_compiler::NodeType;
use crate::kb_store::{KbStore, StoreError};
use crate::llm_provider::LlmProvider;

const DEFAULT_REDIRECT: &str =
    "I can help with incident troubleshooting. Describe the alert or symptom you are mitigating.";

struct SessionHandle {
    /// Single-writer slot; mutations take it with `try_lock`.
    session: tokio::sync::Mutex<MitigationSession>,
    /// Last committed state, for readers and long-polls.
    snapshot: watch::Sender<Arc<MitigationSession>>,
}

/// Drives mitigation sessions. Every transition is written to the event log
/// before it becomes visible, and sessions not in memory are rebuilt from
/// their logs on first use.
pub struct Orchestrator {
    kb: Arc<KbStore>,
    registry: Arc<PluginRegistry>,
    provider: Arc<dyn LlmProvider>,
    expert: Arc<dyn LlmProvider>,
    log: Arc<dyn EventLog>,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdGenerator>,
    config: OrchestratorConfig,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
}

impl Orchestrator {
    /// Defaults: the provider also acts as expert, in-memory log, system
    /// clock, random session ids.
    pub fn new(
        kb: Arc<KbStore>,
        registry: Arc<PluginRegistry>,
        provider: Arc<dyn LlmProvider>,
    ) -> Self {
        Self {
            kb,
            registry,
            expert: provider.clone(),
            provider,
            log: Arc::new(MemoryLog::new()),
            clock: Arc::new(SystemClock),
            ids: Arc::new(RandomIds),
            config: OrchestratorConfig::default(),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_expert(mut self, expert: Arc<dyn LlmProvider>) -> Self {
        self.expert = expert;
        self
    }

    pub fn with_log(mut self, log: Arc<dyn EventLog>) -> Self {
        self.log = log;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: Arc<dyn IdGenerator>) -> Self {
        self.ids = ids;
        self
    }

    pub fn with_config(mut self, config: OrchestratorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn kb(&self) -> &Arc<KbStore> {
        &self.kb
    }

    pub fn registry(&self) -> &Arc<PluginRegistry> {
        &self.registry
    }

    pub fn log(&self) -> &Arc<dyn EventLog> {
        &self.log
    }

    pub async fn start_session(&self) -> Result<MitigationSession, OrchestratorError> {
        let session_id = self.ids.next_id();
        let handle = {
            let mut sessions = self.sessions.lock().expect("session map");
            if sessions.contains_key(&session_id) || !self.log.read(&session_id)?.is_empty() {
                return Err(OrchestratorError::Internal(format!(
                    "session id {session_id} already in use"
                )));
            }
            let handle = Arc::new(SessionHandle {
                session: tokio::sync::Mutex::new(MitigationSession::default()),
                snapshot: watch::channel(Arc::new(MitigationSession::default())).0,
            });
            sessions.insert(session_id.clone(), handle.clone());
            handle
        };
        let mut session = handle
            .session
            .try_lock()
            .map_err(|_| OrchestratorError::Busy(session_id.clone()))?;
        session.session_id = session_id;
        let started = Transition::Started {
            max_iterations: self.config.max_iterations,
        };
        self.transition(
            &handle,
            &mut session,
            SessionState::AwaitingMessage,
            started,
        )?;
        Ok(session.clone())
    }

    /// Latest committed state of a session.
    pub fn session(&self, session_id: &str) -> Result<Arc<MitigationSession>, OrchestratorError> {
        Ok(self.handle(session_id)?.snapshot.borrow().clone())
    }

    pub fn events(&self, session_id: &str) -> Result<Vec<SessionEvent>, OrchestratorError> {
        self.handle(session_id)?;
        Ok(self.log.read(session_id)?)
    }

    /// Wait until the session has committed event `seq`, or until
    /// `timeout`; returns the state at that point.
    pub async fn wait_for_seq(
        &self,
        session_id: &str,
        seq: u64,
        timeout: Duration,
    ) -> Result<Arc<MitigationSession>, OrchestratorError> {
        let mut rx = self.handle(session_id)?.snapshot.subscribe();
        let _ = tokio::time::timeout(timeout, rx.wait_for(|s| s.last_seq >= seq)).await;
        let latest = rx.borrow().clone();
        Ok(latest)
    }

    pub async fn submit_message(
        &self,
        session_id: &str,
        text: &str,
    ) -> Result<MitigationSession, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let mut session = self.lock(&handle, session_id)?;
        self.require(
            &session,
            &[SessionState::AwaitingMessage, SessionState::Clarifying],
            "submit_message",
        )?;
        if text.trim().is_empty() {
            return Err(OrchestratorError::InvalidInput("message is empty".into()));
        }
        let memory = session.agent_memory();
        self.commit(
            &handle,
            &mut session,
            EventPayload::UserMessage {
                text: text.to_string(),
            },
        )?;
        let (to, transition) =
            match agents::interpret_intent(text, &memory, self.provider.as_ref()).await {
                Ok(IntentResult::OffTopic { reply }) => (
                    session.state,
                    Transition::Redirected {
                        reply: reply
                            .filter(|r| !r.trim().is_empty())
                            .unwrap_or_else(|| DEFAULT_REDIRECT.into()),
                    },
                ),
                Ok(IntentResult::NeedsClarification {
                    clarification_question,
                }) => (
                    SessionState::Clarifying,
                    Transition::ClarificationRequested {
                        question: clarification_question,
                    },
                ),
                Ok(IntentResult::Clarified { clarified_intent }) => (
                    SessionState::Retrieving,
                    Transition::IntentClarified {
                        intent: clarified_intent,
                    },
                ),
                Err(err) => failed("intent interpreter", &err),
            };
        self.transition(&handle, &mut session, to, transition)?;
        Ok(session.clone())
    }

    pub async fn submit_manual_result(
        &self,
        session_id: &str,
        text: &str,
    ) -> Result<MitigationSession, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let mut session = self.lock(&handle, session_id)?;
        self.require(
            &session,
            &[SessionState::AwaitingManualResult],
            "submit_manual_result",
        )?;
        let step = session
            .current_step()
            .expect("invariant: manual step at cursor")
            .clone();
        let insight = execution_engine::ingest_manual_result(&step, text, self.clock.as_ref());
        self.commit(
            &handle,
            &mut session,
            EventPayload::ManualResult { insight },
        )?;
        Ok(session.clone())
    }

    /// Run exactly one pipeline stage.
    pub async fn advance(&self, session_id: &str) -> Result<MitigationSession, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let mut session = self.lock(&handle, session_id)?;
        self.require(
            &session,
            &[
                SessionState::Retrieving,
                SessionState::Planning,
                SessionState::ExecutingAuto,
            ],
            "advance",
        )?;
        self.step(&handle, &mut session).await?;
        Ok(session.clone())
    }

    /// Advance until the session needs the engineer or is finished.
    /// Consecutive auto steps therefore run without a human turn, each one
    /// logged before the next starts.
    pub async fn run(&self, session_id: &str) -> Result<MitigationSession, OrchestratorError> {
        let handle = self.handle(session_id)?;
        let mut session = self.lock(&handle, session_id)?;
        if session.state.is_absorbing() {
            return Err(invalid(&session, "run"));
        }
        while !session.state.needs_human() && !session.state.is_absorbing() {
            self.step(&handle, &mut session).await?;
        }
        Ok(session.clone())
    }

    async fn step(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
    ) -> Result<(), OrchestratorError> {
        match session.state {
            SessionState::Retrieving => self.retrieve(handle, session).await,
            SessionState::Planning => self.plan(handle, session).await,
            SessionState::ExecutingAuto if session.plan_exhausted() => {
                self.continue_or_finish(handle, session)
            }
            SessionState::ExecutingAuto => self.execute(handle, session).await,
            _ => Err(invalid(session, "advance")),
        }
    }

    async fn retrieve(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
    ) -> Result<(), OrchestratorError> {
        let query = session.query.clone().unwrap_or_default();
        let scored = match self.kb.retrieve_top_k(&query, self.config.top_k).await {
            Ok(scored) => scored,
            Err(StoreError::EmptyIndex) => {
                return self.escalate(
                    handle,
                    session,
                    EscalationReason::OutOfScope,
                    "knowledge base is empty",
                    vec![],
                );
            }
            Err(err) => {
                let (to, transition) = failed("retrieval", &err);
                return self.transition(handle, session, to, transition);
            }
        };
        let candidates: Vec<Candidate> = scored
            .iter()
            .map(|s| Candidate {
                node_id: s.node.node_id.clone(),
                score: s.score,
            })
            .collect();
        match agents::select_nodes(&query, &scored, self.provider.as_ref()).await {
            Ok(selected) if selected.is_empty() => self.escalate(
                handle,
                session,
                EscalationReason::OutOfScope,
                &format!("no relevant knowledge for `{query}`"),
                candidates,
            ),
            Ok(selected) => self.transition(
                handle,
                session,
                SessionState::Planning,
                Transition::NodesSelected {
                    query,
                    candidates,
                    selected,
                },
            ),
            Err(err) => {
                let (to, transition) = failed("node selector", &err);
                self.transition(handle, session, to, transition)
            }
        }
    }

    async fn plan(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
    ) -> Result<(), OrchestratorError> {
        let memory = session.agent_memory();
        let planned = agents::plan_actions(
            &session.selection,
            &memory,
            &self.registry,
            self.provider.as_ref(),
        )
        .await;
        match planned {
            Ok(plan) => {
                let plan = agents::post_process(&plan, self.expert.as_ref()).await;
                let to = match plan.steps.first().map(|s| s.mode) {
                    Some(agents::StepMode::Manual) => SessionState::AwaitingManualResult,
                    _ => SessionState::ExecutingAuto,
                };
                self.transition(handle, session, to, Transition::PlanReady { plan })
            }
            Err(AgentError::EmptyPlan) => self.escalate(
                handle,
                session,
                EscalationReason::EmptyPlan,
                "the planner found no actionable step",
                vec![],
            ),
            Err(err) => {
                let (to, transition) = failed("action planner", &err);
                self.transition(handle, session, to, transition)
            }
        }
    }

    async fn execute(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
    ) -> Result<(), OrchestratorError> {
        let step = session
            .current_step()
            .expect("plan has a pending step")
            .clone();
        let context = StepContext {
            session_id: session.session_id.clone(),
            params: Default::default(),
        };
        match execution_engine::execute_step(&step, &context, &self.registry, self.clock.as_ref())
            .await
        {
            Ok(insight) => self.commit(handle, session, EventPayload::AutoInsight { insight }),
            Err(err) => {
                let (to, transition) = failed("execution engine", &err);
                self.transition(handle, session, to, transition)
            }
        }
    }

    /// After the last step: a terminal node (or a terminal outcome) resolves
    /// the session; a linker for the last outcome steers the next round;
    /// anything else re-retrieves with the insight's summary.
    fn continue_or_finish(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
    ) -> Result<(), OrchestratorError> {
        let insight = session
            .memory
            .insights
            .last()
            .expect("an exhausted plan produced insights")
            .clone();
        let kb = self.kb.snapshot();
        let node = insight.node_id.as_deref().and_then(|id| kb.node(id));
        let mut continuation = None;
        if let Some(node) = node {
            if node.node_type == NodeType::Terminal
                || node.terminal_outcomes.contains(&insight.outcome_label)
            {
                return self.commit(
                    handle,
                    session,
                    EventPayload::Resolution {
                        node_id: Some(node.node_id.clone()),
                        outcome_label: insight.outcome_label.clone(),
                    },
                );
            }
            if let Some(linker) = node.linker(&insight.outcome_label) {
                let target = linker.resolved_target.as_deref().and_then(|t| kb.node(t));
                let query = target.map_or(linker.target_intent.clone(), |t| t.intent.clone());
                continuation = Some((
                    query,
                    ContinuationSource::Linker {
                        node_id: node.node_id.clone(),
                        outcome_label: linker.outcome_label.clone(),
                        target: target.map(|t| t.node_id.clone()),
                    },
                ));
            }
        }
        let (query, via) = continuation.unwrap_or_else(|| {
            let query = if insight.summary.trim().is_empty() {
                session.query.clone().unwrap_or_default()
            } else {
                insight.summary.clone()
            };
            (query, ContinuationSource::Insight)
        });
        let iteration_count = session.iteration_count + 1;
        if iteration_count >= self.config.max_iterations.min(session.max_iterations) {
            return self.commit(
                handle,
                session,
                EventPayload::Escalation {
                    reason: EscalationReason::BudgetExhausted,
                    detail: format!("no resolution after {iteration_count} iterations"),
                    iteration_count,
                    candidates: vec![],
                },
            );
        }
        self.transition(
            handle,
            session,
            SessionState::Retrieving,
            Transition::Continue {
                query,
                iteration_count,
                via,
            },
        )
    }

    fn escalate(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
        reason: EscalationReason,
        detail: &str,
        candidates: Vec<Candidate>,
    ) -> Result<(), OrchestratorError> {
        self.commit(
            handle,
            session,
            EventPayload::Escalation {
                reason,
                detail: detail.to_string(),
                iteration_count: session.iteration_count,
                candidates,
            },
        )
    }

    fn transition(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
        to: SessionState,
        transition: Transition,
    ) -> Result<(), OrchestratorError> {
        let from = session.state;
        self.commit(
            handle,
            session,
            EventPayload::StateChange {
                from,
                to,
                transition,
            },
        )
    }

    /// Apply to a copy, append to the log, then publish. A failed append
    /// leaves the session untouched.
    fn commit(
        &self,
        handle: &SessionHandle,
        session: &mut MitigationSession,
        payload: EventPayload,
    ) -> Result<(), OrchestratorError> {
        let event = SessionEvent {
            seq: session.last_seq + 1,
            session_id: session.session_id.clone(),
            at: self.clock.now(),
            payload,
        };
        let mut next = session.clone();
        next.apply(&event).map_err(|message| {
            OrchestratorError::Internal(format!(
                "engine produced an inapplicable event {}: {message}",
                event.seq
            ))
        })?;
        self.log.append(&event)?;
        *session = next;
        handle.snapshot.send_replace(Arc::new(session.clone()));
        Ok(())
    }

    fn handle(&self, session_id: &str) -> Result<Arc<SessionHandle>, OrchestratorError> {
        let mut sessions = self.sessions.lock().expect("session map");
        if let Some(handle) = sessions.get(session_id) {
            return Ok(handle.clone());
        }
        let events = match self.log.read(session_id) {
            Ok(events) => events,
            Err(super::LogError::InvalidId(_)) => {
                return Err(OrchestratorError::NotFound(session_id.to_string()))
            }
            Err(err) => return Err(err.into()),
        };
        if events.is_empty() {
            return Err(OrchestratorError::NotFound(session_id.to_string()));
        }
        let session = replay(&events).map_err(|e| OrchestratorError::CorruptLog {
            session_id: session_id.to_string(),
            source: e,
        })?;
        let handle = Arc::new(SessionHandle {
            snapshot: watch::channel(Arc::new(session.clone())).0,
            session: tokio::sync::Mutex::new(session),
        });
        sessions.insert(session_id.to_string(), handle.clone());
        Ok(handle)
    }

    fn lock<'a>(
        &self,
        handle: &'a SessionHandle,
        session_id: &str,
    ) -> Result<tokio::sync::MutexGuard<'a, MitigationSession>, OrchestratorError> {
        handle
            .session
            .try_lock()
            .map_err(|_| OrchestratorError::Busy(session_id.to_string()))
    }

    fn require(
        &self,
        session: &MitigationSession,
        allowed: &[SessionState],
        operation: &'static str,
    ) -> Result<(), OrchestratorError> {
        if allowed.contains(&session.state) {
            Ok(())
        } else {
            Err(invalid(session, operation))
        }
    }
}

fn invalid(session: &MitigationSession, operation: &'static str) -> OrchestratorError {
    OrchestratorError::InvalidState {
        session_id: session.session_id.clone(),
        state: session.state,
        operation,
    }
}

fn failed(stage: &str, err: &dyn std::fmt::Display) -> (SessionState, Transition) {
    (
        SessionState::Failed,
        Transition::Failed {
            diagnostic: format!("{stage}: {err}"),
        },
    )
}

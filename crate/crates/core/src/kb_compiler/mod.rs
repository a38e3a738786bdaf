//! Lowering structured TSGs into linked knowledge nodes.

mod enhancer;
mod resolve;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsg_parser::{OutcomeTarget, StructuredTsg};

pub use enhancer::{
    apply_patches, enhance_from_history, EnhanceError, HistoryCandidate, HistoryPatch,
    HistoryRecord, PatchError, PatchPayload, DEFAULT_DUPLICATE_THRESHOLD,
};
pub use resolve::{
    resolve_linkers, resolve_with_vectors, ResolutionReport, ResolvedLink, UnresolvedLink,
    DEFAULT_RESOLUTION_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Action,
    Decision,
    Check,
    Terminal,
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeType::Action => "action",
            NodeType::Decision => "decision",
            NodeType::Check => "check",
            NodeType::Terminal => "terminal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Tsg,
    History,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSource {
    pub kind: SourceKind,
    /// tsg_id, or the discussion id for history nodes.
    pub document_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linker {
    pub outcome_label: String,
    pub target_intent: String,
    #[serde(default)]
    pub resolved_target: Option<String>,
    /// 1.0 for links resolved by step id; the similarity for links resolved
    /// by intent; 0.0 while unresolved.
    #[serde(default)]
    pub resolution_score: f64,
}

impl Linker {
    pub fn is_resolved(&self) -> bool {
        self.resolved_target.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNode {
    pub node_id: String,
    pub node_type: NodeType,
    /// Retrieval key.
    pub intent: String,
    pub action: String,
    pub linkers: Vec<Linker>,
    /// Outcome labels that end the flow at this node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terminal_outcomes: Vec<String>,
    pub source: NodeSource,
    #[serde(default)]
    pub executable_hint: Option<String>,
    /// References of history discussions that revised this node.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl KnowledgeNode {
    pub fn linker(&self, outcome_label: &str) -> Option<&Linker> {
        self.linkers
            .iter()
            .find(|l| l.outcome_label == outcome_label)
    }

    /// Every outcome label this node's action can produce.
    pub fn outcome_labels(&self) -> Vec<String> {
        self.linkers
            .iter()
            .map(|l| l.outcome_label.clone())
            .chain(self.terminal_outcomes.iter().cloned())
            .collect()
    }

    pub fn tsg_id(&self) -> Option<&str> {
        (self.source.kind == SourceKind::Tsg).then_some(self.source.document_id.as_str())
    }

    pub fn check_invariants(&self) -> Result<(), CompileError> {
        let fail = |message: String| {
            Err(CompileError {
                node_id: self.node_id.clone(),
                message,
            })
        };
        if self.intent.trim().is_empty() {
            return fail("intent is empty".into());
        }
        if self.action.trim().is_empty() {
            return fail("action is empty".into());
        }
        if (self.node_type == NodeType::Terminal) != self.linkers.is_empty() {
            return fail(format!(
                "node type {} disagrees with {} linkers",
                self.node_type,
                self.linkers.len()
            ));
        }
        let mut labels = HashSet::new();
        for label in self
            .linkers
            .iter()
            .map(|l| &l.outcome_label)
            .chain(&self.terminal_outcomes)
        {
            if !labels.insert(label) {
                return fail(format!("duplicate outcome label `{label}`"));
            }
        }
        Ok(())
    }
}

/// Type rule: no linkers → terminal; two or more → decision; exactly one
/// and the action starts with check/verify/confirm → check; else action.
pub fn classify(linker_count: usize, action: &str) -> NodeType {
    match linker_count {
        0 => NodeType::Terminal,
        1 => {
            let lower = action.trim_start().to_lowercase();
            if ["check", "verify", "confirm"]
                .iter()
                .any(|p| lower.starts_with(p))
            {
                NodeType::Check
            } else {
                NodeType::Action
            }
        }
        _ => NodeType::Decision,
    }
}

pub fn node_id(tsg_id: &str, step_id: &str) -> String {
    format!("{tsg_id}/{step_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot compile node {node_id}: {message}")]
pub struct CompileError {
    pub node_id: String,
    pub message: String,
}

/// One node per flow step, in flow order. Internal outcome targets become
/// resolved linkers (score 1.0), external intents unresolved linkers, and
/// TERMINAL outcomes terminal labels.
pub fn compile(tsg: &StructuredTsg) -> Result<Vec<KnowledgeNode>, CompileError> {
    let mut nodes = Vec::with_capacity(tsg.flow.len());
    let mut ids = HashSet::new();
    for step in &tsg.flow {
        let id = node_id(&tsg.tsg_id, &step.step_id);
        let mut linkers = Vec::new();
        let mut terminal_outcomes = Vec::new();
        for (label, target) in step.outcomes.iter() {
            match target {
                OutcomeTarget::Step(target_step) => {
                    let successor = tsg.step(target_step).ok_or_else(|| CompileError {
                        node_id: id.clone(),
                        message: format!(
                            "outcome `{label}` references unknown step `{target_step}`"
                        ),
                    })?;
                    linkers.push(Linker {
                        outcome_label: label.to_string(),
                        target_intent: successor.intent.clone(),
                        resolved_target: Some(node_id(&tsg.tsg_id, target_step)),
                        resolution_score: 1.0,
                    });
                }
                OutcomeTarget::ExternalIntent(intent) => linkers.push(Linker {
                    outcome_label: label.to_string(),
                    target_intent: intent.clone(),
                    resolved_target: None,
                    resolution_score: 0.0,
                }),
                OutcomeTarget::Terminal => terminal_outcomes.push(label.to_string()),
            }
        }
        let node = KnowledgeNode {
            node_type: classify(linkers.len(), &step.action),
            node_id: id.clone(),
            intent: step.intent.clone(),
            action: step.action.clone(),
            linkers,
            terminal_outcomes,
            source: NodeSource {
                kind: SourceKind::Tsg,
                document_id: tsg.tsg_id.clone(),
            },
            executable_hint: step.executable_hint.clone(),
            provenance: Vec::new(),
        };
        node.check_invariants()?;
        if !ids.insert(id.clone()) {
            return Err(CompileError {
                node_id: id,
                message: "duplicate node id".into(),
            });
        }
        nodes.push(node);
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsg_parser::{parse_structured_tsg, FlowStep, Outcomes};

    fn linear_chain() -> StructuredTsg {
        parse_structured_tsg(include_str!("../../tests/fixtures/linear_chain.tsg.json")).unwrap()
    }

    #[test]
    fn linear_chain_compiles_to_three_nodes() {
        let nodes = compile(&linear_chain()).unwrap();
        assert_eq!(nodes.len(), 3);
        let s1 = &nodes[0];
        assert_eq!(s1.node_id, "linear_chain/S1");
        assert_eq!(s1.linkers.len(), 1);
        assert_eq!(s1.linkers[0].outcome_label, "done");
        assert_eq!(
            s1.linkers[0].resolved_target.as_deref(),
            Some("linear_chain/S2")
        );
        assert_eq!(s1.linkers[0].resolution_score, 1.0);
        assert_eq!(s1.linkers[0].target_intent, "restart failing frontend node");
        assert_eq!(s1.node_type, NodeType::Action);
        assert_eq!(nodes[2].node_type, NodeType::Terminal);
        assert!(nodes[2].linkers.is_empty());
    }

    #[test]
    fn single_step_is_terminal() {
        let mut tsg = linear_chain();
        tsg.flow.truncate(1);
        tsg.flow[0].outcomes = Outcomes::new();
        let nodes = compile(&tsg).unwrap();
        assert_eq!(nodes.len(), 1);
        assert_eq!(nodes[0].node_type, NodeType::Terminal);
    }

    #[test]
    fn two_outcomes_make_a_decision() {
        let mut tsg = linear_chain();
        tsg.flow[0].outcomes = [
            ("high", OutcomeTarget::Step("S2".into())),
            (
                "low",
                OutcomeTarget::ExternalIntent("check storage quota".into()),
            ),
        ]
        .into_iter()
        .collect();
        let nodes = compile(&tsg).unwrap();
        let n = &nodes[0];
        assert_eq!(n.node_type, NodeType::Decision);
        assert!(n.linkers[0].is_resolved());
        assert!(!n.linkers[1].is_resolved());
        assert_eq!(n.linkers[1].target_intent, "check storage quota");
    }

    #[test]
    fn classification_rule() {
        assert_eq!(classify(0, "anything"), NodeType::Terminal);
        assert_eq!(classify(1, "Verify replica lag"), NodeType::Check);
        assert_eq!(classify(1, "  confirm the failover"), NodeType::Check);
        assert_eq!(classify(1, "Restart the node"), NodeType::Action);
        assert_eq!(classify(3, "Check it"), NodeType::Decision);
    }

    #[test]
    fn terminal_outcomes_do_not_count_as_linkers() {
        let mut tsg = linear_chain();
        tsg.flow[2].outcomes = [("recovered", OutcomeTarget::Terminal)]
            .into_iter()
            .collect();
        let nodes = compile(&tsg).unwrap();
        assert_eq!(nodes[2].node_type, NodeType::Terminal);
        assert_eq!(nodes[2].terminal_outcomes, vec!["recovered"]);
        assert_eq!(nodes[2].outcome_labels(), vec!["recovered"]);
    }

    #[test]
    fn compile_is_deterministic_and_conserving() {
        let tsg = linear_chain();
        assert_eq!(compile(&tsg).unwrap(), compile(&tsg).unwrap());
        assert_eq!(compile(&tsg).unwrap().len(), tsg.flow.len());
    }

    #[test]
    fn dangling_step_reference_is_a_compile_error() {
        let mut tsg = linear_chain();
        tsg.flow.push(FlowStep {
            step_id: "S4".into(),
            intent: "i".into(),
            action: "do it now".into(),
            outcomes: [("x", OutcomeTarget::Step("S9".into()))]
                .into_iter()
                .collect(),
            executable_hint: None,
        });
        let err = compile(&tsg).unwrap_err();
        assert_eq!(err.node_id, "linear_chain/S4");
    }
}

//! Mining incident discussions for knowledge the TSGs lack.
//!
//! Extraction produces staged [`HistoryPatch`]es; nothing reaches the
//! knowledge base until [`apply_patches`] accepts the whole batch.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{classify, resolve_linkers, KnowledgeNode, Linker, NodeSource, SourceKind};
use crate::kb_store::{KnowledgeBase, StoreError};
use crate::llm_provider::{
    chat_with_retries, ChatError, ChatRequest, Embedder, LlmProvider, ProviderError, SchemaId,
    StructuredOutput,
};
use crate::prompts;

pub const DEFAULT_DUPLICATE_THRESHOLD: f64 = 0.9;

const AGENT: &str = "history_enhancer";
const RETRIES: usize = 2;

/// One incident discussion thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub discussion_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryCandidate {
    pub intent: String,
    pub action: String,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub next_intent: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Extraction {
    candidates: Vec<HistoryCandidate>,
}

impl StructuredOutput for Extraction {
    const SCHEMA: SchemaId = SchemaId::HistoryExtraction;

    fn check(&self) -> Result<(), String> {
        for c in &self.candidates {
            if c.intent.trim().is_empty() || c.action.trim().is_empty() {
                return Err("candidate intent and action must be non-empty".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchPayload {
    NewNode { node: KnowledgeNode },
    UpdateAction { node_id: String, action: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPatch {
    pub patch_id: String,
    #[serde(flatten)]
    pub payload: PatchPayload,
    /// Discussion the knowledge came from.
    pub provenance: String,
    pub similarity_to_existing: f64,
}

impl HistoryPatch {
    pub fn target_node_id(&self) -> &str {
        match &self.payload {
            PatchPayload::NewNode { node } => &node.node_id,
            PatchPayload::UpdateAction { node_id, .. } => node_id,
        }
    }
}

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Chat(ChatError),
    /// The discussions contained no extractable mitigation steps.
    #[error("no candidate steps found in {0} discussions")]
    ExtractionEmpty(usize),
}

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patches conflict on node {node_id}: {reason}")]
    PatchConflict { node_id: String, reason: String },
    #[error("patch {patch_id} targets unknown node {node_id}")]
    UnknownTarget { patch_id: String, node_id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

fn history_node_id(intent: &str) -> String {
    let digest = Sha256::digest(intent.as_bytes());
    format!("hist/{}", &hex::encode(digest)[..12])
}

/// Extract candidates from each discussion and turn them into patches: a
/// candidate whose intent is at least `duplicate_threshold` similar to an
/// existing node updates that node's action, anything else becomes a new
/// history node.
pub async fn enhance_from_history(
    discussions: &[HistoryRecord],
    kb: &KnowledgeBase,
    provider: &dyn LlmProvider,
    embedder: &dyn Embedder,
    duplicate_threshold: f64,
) -> Result<Vec<HistoryPatch>, EnhanceError> {
    if discussions.is_empty() {
        return Ok(Vec::new());
    }
    let system = prompts::render(
        prompts::HISTORY_ENHANCER,
        &[("schema", SchemaId::HistoryExtraction.json_schema())],
    );
    let mut patches = Vec::new();
    let mut candidate_count = 0;
    let mut new_ids = HashSet::new();
    for discussion in discussions {
        let request = ChatRequest::new(AGENT, SchemaId::HistoryExtraction)
            .system(system.clone())
            .user(discussion.text.clone());
        let extraction: Extraction = chat_with_retries(provider, &request, RETRIES)
            .await
            .map_err(|e| match e {
                ChatError::Provider(p) => EnhanceError::Provider(p),
                other => EnhanceError::Chat(other),
            })?;
        for (i, candidate) in extraction.candidates.into_iter().enumerate() {
            candidate_count += 1;
            let patch_id = format!("patch/{}/{}", discussion.discussion_id, i);
            let query = embedder.embed(&candidate.intent).await?;
            let best = kb.best_match(&query.values, &candidate.intent, None);
            let payload = match best {
                Some((node_id, score)) if score >= duplicate_threshold => {
                    patches.push(HistoryPatch {
                        patch_id,
                        payload: PatchPayload::UpdateAction {
                            node_id,
                            action: candidate.action,
                        },
                        provenance: discussion.discussion_id.clone(),
                        similarity_to_existing: score,
                    });
                    continue;
                }
                best => (
                    new_node(&candidate, &discussion.discussion_id),
                    best.map_or(0.0, |(_, s)| s.max(0.0)),
                ),
            };
            let (node, similarity) = payload;
            if !new_ids.insert(node.node_id.clone()) {
                continue;
            }
            patches.push(HistoryPatch {
                patch_id,
                payload: PatchPayload::NewNode { node },
                provenance: discussion.discussion_id.clone(),
                similarity_to_existing: similarity,
            });
        }
    }
    if candidate_count == 0 {
        return Err(EnhanceError::ExtractionEmpty(discussions.len()));
    }
    Ok(patches)
}

fn new_node(candidate: &HistoryCandidate, discussion_id: &str) -> KnowledgeNode {
    let outcome = candidate
        .outcome
        .clone()
        .unwrap_or_else(|| "done".to_string());
    let (linkers, terminal_outcomes) = match &candidate.next_intent {
        Some(next) if !next.trim().is_empty() => (
            vec![Linker {
                outcome_label: outcome,
                target_intent: next.clone(),
                resolved_target: None,
                resolution_score: 0.0,
            }],
            Vec::new(),
        ),
        _ => (Vec::new(), candidate.outcome.clone().into_iter().collect()),
    };
    KnowledgeNode {
        node_id: history_node_id(&candidate.intent),
        node_type: classify(linkers.len(), &candidate.action),
        intent: candidate.intent.clone(),
        action: candidate.action.clone(),
        linkers,
        terminal_outcomes,
        source: NodeSource {
            kind: SourceKind::History,
            document_id: discussion_id.to_string(),
        },
        executable_hint: None,
        provenance: vec![discussion_id.to_string()],
    }
}

/// Apply a batch of patches to a copy of `kb` and return the copy. New
/// nodes are embedded and indexed, then unresolved linkers across the
/// whole graph are re-resolved. `kb` itself is never modified, so a failed
/// batch leaves it exactly as it was.
pub async fn apply_patches(
    patches: &[HistoryPatch],
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    resolution_threshold: f64,
) -> Result<KnowledgeBase, PatchError> {
    let mut updated_targets = BTreeSet::new();
    let mut new_nodes = Vec::new();
    let mut new_ids = BTreeSet::new();
    for patch in patches {
        match &patch.payload {
            PatchPayload::NewNode { node } => {
                if kb.node(&node.node_id).is_some() || !new_ids.insert(node.node_id.clone()) {
                    return Err(PatchError::PatchConflict {
                        node_id: node.node_id.clone(),
                        reason: "node already exists".into(),
                    });
                }
                node.check_invariants()
                    .map_err(|e| PatchError::PatchConflict {
                        node_id: node.node_id.clone(),
                        reason: e.message,
                    })?;
                new_nodes.push(node.clone());
            }
            PatchPayload::UpdateAction { node_id, .. } => {
                if !updated_targets.insert(node_id.clone()) {
                    return Err(PatchError::PatchConflict {
                        node_id: node_id.clone(),
                        reason: "more than one update_action".into(),
                    });
                }
            }
        }
    }
    for patch in patches {
        if let PatchPayload::UpdateAction { node_id, .. } = &patch.payload {
            if kb.node(node_id).is_none() && !new_ids.contains(node_id) {
                return Err(PatchError::UnknownTarget {
                    patch_id: patch.patch_id.clone(),
                    node_id: node_id.clone(),
                });
            }
        }
    }

    let mut next = kb.clone();
    next.upsert_nodes(new_nodes, embedder).await?;
    for patch in patches {
        if let PatchPayload::UpdateAction { node_id, action } = &patch.payload {
            let node = next.node_mut(node_id).expect("target checked above");
            node.action = action.clone();
            node.provenance.push(patch.provenance.clone());
        }
    }
    resolve_linkers(&mut next, embedder, resolution_threshold).await?;
    Ok(next)
}

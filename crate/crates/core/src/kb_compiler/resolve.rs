//! Resolving external linker intents to nodes, which is how flows that
//! cross TSG boundaries appear in the graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kb_store::KnowledgeBase;
use crate::llm_provider::{Embedder, ProviderError};

pub const DEFAULT_RESOLUTION_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLink {
    pub node_id: String,
    pub outcome_label: String,
    pub target: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnresolvedLink {
    pub node_id: String,
    pub outcome_label: String,
    pub target_intent: String,
    /// Best similarity seen, or `None` if there was no other node.
    pub best_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolutionReport {
    /// Links resolved by this call.
    pub resolved: Vec<ResolvedLink>,
    pub unresolved: Vec<UnresolvedLink>,
}

/// Embeds every distinct target intent still open to resolution and
/// resolves against the index; see [`resolve_with_vectors`].
pub async fn resolve_linkers(
    kb: &mut KnowledgeBase,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<ResolutionReport, ProviderError> {
    let mut targets = BTreeMap::new();
    for node in kb.nodes() {
        for linker in node.linkers.iter().filter(|l| open_to_resolution(l)) {
            if !targets.contains_key(&linker.target_intent) {
                let vector = embedder.embed(&linker.target_intent).await?;
                targets.insert(linker.target_intent.clone(), vector.values);
            }
        }
    }
    Ok(resolve_with_vectors(kb, &targets, threshold))
}

/// For every unresolved linker, find the most similar node intent other
/// than the linker's own node. The best match is taken when its score is
/// at least `threshold`; equal scores go to the smallest node id. A target
/// intent that equals a node's intent verbatim scores exactly 1.0.
///
/// A linker resolved by similarity below 1.0 moves only to a strictly
/// better match, which lets a guide ingested later claim links that an
/// earlier near-miss had taken. Links at 1.0, which includes every
/// internal step reference, are final. Running the operation twice changes
/// nothing the second time.
pub fn resolve_with_vectors(
    kb: &mut KnowledgeBase,
    target_vectors: &BTreeMap<String, Vec<f64>>,
    threshold: f64,
) -> ResolutionReport {
    let mut report = ResolutionReport::default();
    let mut updates = Vec::new();
    for node in kb.nodes() {
        for (i, linker) in node.linkers.iter().enumerate() {
            if !open_to_resolution(linker) {
                continue;
            }
            let Some(query) = target_vectors.get(&linker.target_intent) else {
                continue;
            };
            let best = kb.best_match(query, &linker.target_intent, Some(&node.node_id));
            if linker.is_resolved() {
                if let Some((target, score)) =
                    best.filter(|(_, s)| *s > linker.resolution_score + 1e-12)
                {
                    report.resolved.push(ResolvedLink {
                        node_id: node.node_id.clone(),
                        outcome_label: linker.outcome_label.clone(),
                        target: target.clone(),
                        score,
                    });
                    updates.push((node.node_id.clone(), i, target, score));
                }
                continue;
            }
            match best {
                Some((target, score)) if score >= threshold => {
                    report.resolved.push(ResolvedLink {
                        node_id: node.node_id.clone(),
                        outcome_label: linker.outcome_label.clone(),
                        target: target.clone(),
                        score,
                    });
                    updates.push((node.node_id.clone(), i, target, score));
                }
                _ => report.unresolved.push(UnresolvedLink {
                    node_id: node.node_id.clone(),
                    outcome_label: linker.outcome_label.clone(),
                    target_intent: linker.target_intent.clone(),
                    best_score: best.map(|(_, s)| s),
                }),
            }
        }
    }
    for (node_id, i, target, score) in updates {
        if let Some(node) = kb.node_mut(&node_id) {
            node.linkers[i].resolved_target = Some(target);
            node.linkers[i].resolution_score = score;
        }
    }
    report
}

fn open_to_resolution(linker: &crate::kb_compiler::Linker) -> bool {
    !linker.is_resolved() || linker.resolution_score < 1.0
}

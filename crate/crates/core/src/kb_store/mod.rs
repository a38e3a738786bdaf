//! Knowledge base storage: nodes, the intent embedding index, exact
//! top-k retrieval and graph queries.

mod graph;
mod persist;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::future::Future;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb_compiler::{CompileError, KnowledgeNode, Linker};
use crate::llm_provider::{cosine, Embedder, ProviderError};

pub use graph::{GraphEdge, GraphNode, KbGraph};

pub const DEFAULT_TOP_K: usize = 5;

/// Accepted deviation of an indexed vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("the intent index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {node_id} has no outcome `{outcome_label}`")]
    UnknownOutcome {
        node_id: String,
        outcome_label: String,
    },
    #[error("embedder mismatch: knowledge base uses {expected}, got {found}")]
    EmbedderMismatch { expected: String, found: String },
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    InvalidNode(#[from] CompileError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed knowledge base file at line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNode {
    pub node: KnowledgeNode,
    pub score: f64,
}

/// node_id → unit embedding of the node's intent, for one embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentIndex {
    embedder_id: String,
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl IntentIndex {
    pub fn new(embedder_id: impl Into<String>, dim: usize) -> Self {
        Self {
            embedder_id: embedder_id.into(),
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, node_id: &str) -> Option<&[f64]> {
        self.entries.get(node_id).map(Vec::as_slice)
    }

    /// Entries in ascending node id order.
    pub fn entries(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    nodes: BTreeMap<String, KnowledgeNode>,
    index: IntentIndex,
}

/// Scores are compared at 1e-12 resolution so that cosines which are
/// equal in exact arithmetic but differ by rounding still tie, and fall
/// through to the node id.
fn rank_key(score: f64) -> i64 {
    (score * 1e12).round() as i64
}

fn by_score_then_id(a: &(f64, &String), b: &(f64, &String)) -> Ordering {
    rank_key(b.0).cmp(&rank_key(a.0)).then_with(|| a.1.cmp(b.1))
}

impl KnowledgeBase {
    pub fn new(embedder_id: impl Into<String>, dim: usize) -> Self {
        Self {
            nodes: BTreeMap::new(),
            index: IntentIndex::new(embedder_id, dim),
        }
    }

    pub fn for_embedder(embedder: &dyn Embedder) -> Self {
        Self::new(embedder.embedder_id(), embedder.dim())
    }

    pub fn embedder_id(&self) -> &str {
        self.index.embedder_id()
    }

    pub fn index(&self) -> &IntentIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, node_id: &str) -> Option<&KnowledgeNode> {
        self.nodes.get(node_id)
    }

    pub(crate) fn node_mut(&mut self, node_id: &str) -> Option<&mut KnowledgeNode> {
        self.nodes.get_mut(node_id)
    }

    /// Nodes in ascending node id order.
    pub fn nodes(&self) -> impl Iterator<Item = &KnowledgeNode> {
        self.nodes.values()
    }

    /// Node ids whose source is the given TSG.
    pub fn document_node_ids(&self, tsg_id: &str) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| n.tsg_id() == Some(tsg_id))
            .map(|n| n.node_id.clone())
            .collect()
    }

    fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), StoreError> {
        if embedder.embedder_id() != self.index.embedder_id {
            return Err(StoreError::EmbedderMismatch {
                expected: self.index.embedder_id.clone(),
                found: embedder.embedder_id().to_string(),
            });
        }
        Ok(())
    }

    /// Insert or replace nodes by id, embedding their intents. Every
    /// embedding is computed before anything is written, so a provider
    /// failure leaves the knowledge base untouched.
    pub async fn upsert_nodes(
        &mut self,
        nodes: Vec<KnowledgeNode>,
        embedder: &dyn Embedder,
    ) -> Result<usize, StoreError> {
        self.check_embedder(embedder)?;
        let mut staged = Vec::with_capacity(nodes.len());
        for node in nodes {
            node.check_invariants()?;
            let vector = embedder.embed(&node.intent).await?;
            if vector.values.len() != self.index.dim {
                return Err(StoreError::DimensionMismatch {
                    expected: self.index.dim,
                    found: vector.values.len(),
                });
            }
            staged.push((node, vector.values));
        }
        let count = staged.len();
        for (node, vector) in staged {
            self.index.entries.insert(node.node_id.clone(), vector);
            self.nodes.insert(node.node_id.clone(), node);
        }
        Ok(count)
    }

    /// Remove every node of a TSG. Linkers elsewhere that pointed at a
    /// removed node become unresolved again.
    pub fn remove_document(&mut self, tsg_id: &str) -> Vec<String> {
        let removed = self.document_node_ids(tsg_id);
        for id in &removed {
            self.nodes.remove(id);
            self.index.entries.remove(id);
        }
        for node in self.nodes.values_mut() {
            for linker in &mut node.linkers {
                if linker
                    .resolved_target
                    .as_ref()
                    .is_some_and(|t| removed.contains(t))
                {
                    linker.resolved_target = None;
                    linker.resolution_score = 0.0;
                }
            }
        }
        removed
    }

    /// Exact top-k by cosine similarity against a unit query vector,
    /// sorted by score descending then node id ascending.
    pub fn retrieve_by_vector(
        &self,
        query: &[f64],
        k: usize,
    ) -> Result<Vec<ScoredNode>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if self.index.is_empty() {
            return Err(StoreError::EmptyIndex);
        }
        if query.len() != self.index.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.index.dim,
                found: query.len(),
            });
        }
        let mut scored: Vec<(f64, &String)> = self
            .index
            .entries
            .iter()
            .map(|(id, v)| (cosine(query, v).clamp(-1.0, 1.0), id))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_score_then_id);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_score_then_id);
        debug_assert!(scored
            .windows(2)
            .all(|w| by_score_then_id(&w[0], &w[1]) != Ordering::Greater));
        debug_assert!(scored.iter().all(|(s, _)| (-1.0..=1.0).contains(s)));
        Ok(scored
            .into_iter()
            .map(|(score, id)| ScoredNode {
                node: self.nodes[id].clone(),
                score,
            })
            .collect())
    }

    pub async fn retrieve_top_k(
        &self,
        query_intent: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredNode>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if self.index.is_empty() {
            return Err(StoreError::EmptyIndex);
        }
        self.check_embedder(embedder)?;
        let query = embedder.embed(query_intent).await?;
        self.retrieve_by_vector(&query.values, k)
    }

    /// Most similar node to `query`, skipping `exclude`. A node whose
    /// intent equals `query_text` verbatim scores exactly 1.0; equal
    /// scores go to the smallest node id.
    pub fn best_match(
        &self,
        query: &[f64],
        query_text: &str,
        exclude: Option<&str>,
    ) -> Option<(String, f64)> {
        let mut best: Option<(f64, &String)> = None;
        for (id, vector) in &self.index.entries {
            if Some(id.as_str()) == exclude {
                continue;
            }
            let exact = self.nodes.get(id).is_some_and(|n| n.intent == query_text);
            let score = if exact {
                1.0
            } else {
                cosine(query, vector).clamp(-1.0, 1.0)
            };
            if best.is_none_or(|(s, _)| rank_key(score) > rank_key(s)) {
                best = Some((score, id));
            }
        }
        best.map(|(s, id)| (id.clone(), s))
    }

    /// Successors of `node_id`, optionally restricted to one outcome.
    /// Unresolved linkers come back with no node.
    pub fn neighbors(
        &self,
        node_id: &str,
        outcome_label: Option<&str>,
    ) -> Result<Vec<(Linker, Option<KnowledgeNode>)>, StoreError> {
        let node = self
            .nodes
            .get(node_id)
            .ok_or_else(|| StoreError::UnknownNode(node_id.to_string()))?;
        if let Some(label) = outcome_label {
            if node.linker(label).is_none() && !node.terminal_outcomes.iter().any(|t| t == label) {
                return Err(StoreError::UnknownOutcome {
                    node_id: node_id.to_string(),
                    outcome_label: label.to_string(),
                });
            }
        }
        Ok(node
            .linkers
            .iter()
            .filter(|l| outcome_label.is_none_or(|label| l.outcome_label == label))
            .map(|l| {
                let target = l
                    .resolved_target
                    .as_ref()
                    .and_then(|t| self.nodes.get(t))
                    .cloned();
                (l.clone(), target)
            })
            .collect())
    }

    pub fn graph(&self) -> KbGraph {
        KbGraph::from_kb(self)
    }

    /// Every resolved linker names an existing node.
    pub fn dangling_targets(&self) -> Vec<(String, String)> {
        self.nodes
            .values()
            .flat_map(|n| {
                n.linkers.iter().filter_map(|l| {
                    l.resolved_target
                        .as_ref()
                        .filter(|t| !self.nodes.contains_key(*t))
                        .map(|t| (n.node_id.clone(), t.clone()))
                })
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        persist::to_jsonl(self)
    }

    pub fn from_jsonl(text: &str, expected_embedder_id: &str) -> Result<Self, StoreError> {
        persist::from_jsonl(text, expected_embedder_id)
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        persist::save(self, path)
    }

    pub fn load(path: &Path, expected_embedder_id: &str) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text, expected_embedder_id)
    }
}

/// Shared knowledge base handle: readers take immutable snapshots, a
/// single writer builds the next version off to the side and swaps it in.
pub struct KbStore {
    current: RwLock<Arc<KnowledgeBase>>,
    writer: tokio::sync::Mutex<()>,
    embedder: Arc<dyn Embedder>,
}

impl KbStore {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        let kb = KnowledgeBase::for_embedder(embedder.as_ref());
        Self::with_kb(kb, embedder)
    }

    pub fn with_kb(kb: KnowledgeBase, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            current: RwLock::new(Arc::new(kb)),
            writer: tokio::sync::Mutex::new(()),
            embedder,
        }
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        self.current.read().unwrap().clone()
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        self.embedder.clone()
    }

    /// Run `edit` on a private copy under the writer lock; the copy
    /// replaces the current version only if `edit` succeeds.
    pub async fn update<T, E, F, Fut>(&self, edit: F) -> Result<T, E>
    where
        F: FnOnce(KnowledgeBase, Arc<dyn Embedder>) -> Fut,
        Fut: Future<Output = Result<(KnowledgeBase, T), E>>,
    {
        let _guard = self.writer.lock().await;
        let draft = (*self.snapshot()).clone();
        let (next, value) = edit(draft, self.embedder.clone()).await?;
        *self.current.write().unwrap() = Arc::new(next);
        Ok(value)
    }

    pub async fn upsert_nodes(&self, nodes: Vec<KnowledgeNode>) -> Result<usize, StoreError> {
        self.update(|mut kb, embedder| async move {
            let n = kb.upsert_nodes(nodes, embedder.as_ref()).await?;
            Ok((kb, n))
        })
        .await
    }

    pub async fn retrieve_top_k(
        &self,
        query_intent: &str,
        k: usize,
    ) -> Result<Vec<ScoredNode>, StoreError> {
        self.snapshot()
            .retrieve_top_k(query_intent, k, self.embedder.as_ref())
            .await
    }

    /// Replace the current knowledge base with the file's contents. On
    /// any error the current version is kept.
    pub async fn load(&self, path: &Path) -> Result<usize, StoreError> {
        let expected = self.embedder.embedder_id().to_string();
        let path = path.to_path_buf();
        self.update(|_, _| async move {
            let kb = KnowledgeBase::load(&path, &expected)?;
            let n = kb.len();
            Ok((kb, n))
        })
        .await
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.snapshot().save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb_compiler::{compile, NodeSource, NodeType, SourceKind};
    use crate::llm_provider::{EmbeddingVector, HashEmbedder};
    use crate::tsg_parser::parse_structured_tsg;
    use async_trait::async_trait;

    fn linear_nodes() -> Vec<KnowledgeNode> {
        compile(
            &parse_structured_tsg(include_str!("../../tests/fixtures/linear_chain.tsg.json"))
                .unwrap(),
        )
        .unwrap()
    }

    async fn linear_kb() -> KnowledgeBase {
        let mut kb = KnowledgeBase::for_embedder(&HashEmbedder);
        kb.upsert_nodes(linear_nodes(), &HashEmbedder)
            .await
            .unwrap();
        kb
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[tokio::test]
    async fn upsert_into_empty_store() {
        let kb = linear_kb().await;
        assert_eq!(kb.len(), 3);
        assert_eq!(kb.index().len(), 3);
        assert!(kb
            .index()
            .entries()
            .all(|(_, v)| (norm(v) - 1.0).abs() < NORM_TOLERANCE));
    }

    #[tokio::test]
    async fn re_upsert_is_byte_identical() {
        let mut kb = linear_kb().await;
        let before = kb.to_jsonl();
        assert_eq!(
            kb.upsert_nodes(linear_nodes(), &HashEmbedder)
                .await
                .unwrap(),
            3
        );
        assert_eq!(kb.to_jsonl(), before);
    }

    #[tokio::test]
    async fn changed_intent_changes_only_its_vector() {
        let mut kb = linear_kb().await;
        let before = kb.index().clone();
        let mut node = linear_nodes().remove(1);
        node.intent = "restart the crashed frontend process".into();
        kb.upsert_nodes(vec![node], &HashEmbedder).await.unwrap();
        let expected = HashEmbedder
            .embed_text("restart the crashed frontend process")
            .unwrap();
        assert_eq!(
            kb.index().get("linear_chain/S2").unwrap(),
            expected.values.as_slice()
        );
        assert_ne!(
            kb.index().get("linear_chain/S2"),
            before.get("linear_chain/S2")
        );
        assert_eq!(
            kb.index().get("linear_chain/S1"),
            before.get("linear_chain/S1")
        );
        assert_eq!(
            kb.index().get("linear_chain/S3"),
            before.get("linear_chain/S3")
        );
    }

    struct FailingEmbedder;

    #[async_trait]
    impl Embedder for FailingEmbedder {
        fn embedder_id(&self) -> &str {
            "hash-v1"
        }
        fn dim(&self) -> usize {
            256
        }
        async fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
            if text.contains("confirm") {
                Err(ProviderError::Transport("down".into()))
            } else {
                HashEmbedder.embed_text(text)
            }
        }
    }

    #[tokio::test]
    async fn provider_failure_leaves_store_untouched() {
        let mut kb = KnowledgeBase::for_embedder(&HashEmbedder);
        let err = kb
            .upsert_nodes(linear_nodes(), &FailingEmbedder)
            .await
            .unwrap_err();
        assert!(matches!(err, StoreError::Provider(_)));
        assert!(kb.is_empty() && kb.index().is_empty());
    }

    #[tokio::test]
    async fn exact_query_ranks_first() {
        let kb = linear_kb().await;
        let hits = kb
            .retrieve_top_k("restart failing frontend node", 2, &HashEmbedder)
            .await
            .unwrap();
        assert_eq!(hits[0].node.node_id, "linear_chain/S2");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits.len(), 2);
    }

    #[tokio::test]
    async fn k_larger_than_kb_truncates() {
        let mut kb = linear_kb().await;
        let mut extra = linear_nodes().remove(2);
        extra.node_id = "other/S1".into();
        kb.upsert_nodes(vec![extra], &HashEmbedder).await.unwrap();
        let hits = kb
            .retrieve_top_k("frontend", 10, &HashEmbedder)
            .await
            .unwrap();
        assert_eq!(hits.len(), 4);
        // identical intents tie; the smaller id comes first
        let ids: Vec<_> = hits.iter().map(|h| h.node.node_id.as_str()).collect();
        let pos_a = ids.iter().position(|i| *i == "linear_chain/S3").unwrap();
        let pos_b = ids.iter().position(|i| *i == "other/S1").unwrap();
        assert_eq!(pos_b, pos_a + 1);
    }

    #[tokio::test]
    async fn retrieval_errors() {
        let kb = KnowledgeBase::for_embedder(&HashEmbedder);
        assert!(matches!(
            kb.retrieve_top_k("x", 1, &HashEmbedder).await,
            Err(StoreError::EmptyIndex)
        ));
        let kb = linear_kb().await;
        assert!(matches!(
            kb.retrieve_top_k("x", 0, &HashEmbedder).await,
            Err(StoreError::InvalidK)
        ));
    }

    #[tokio::test]
    async fn neighbors_contract() {
        let mut kb = linear_kb().await;
        assert!(kb.neighbors("linear_chain/S3", None).unwrap().is_empty());
        let next = kb.neighbors("linear_chain/S1", Some("done")).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].1.as_ref().unwrap().node_id, "linear_chain/S2");
        assert!(matches!(
            kb.neighbors("nosuch/x", None),
            Err(StoreError::UnknownNode(_))
        ));
        assert!(matches!(
            kb.neighbors("linear_chain/S1", Some("nope")),
            Err(StoreError::UnknownOutcome { .. })
        ));

        let node = KnowledgeNode {
            node_id: "ext/S1".into(),
            node_type: NodeType::Action,
            intent: "page the storage team".into(),
            action: "Open a ticket with the storage team".into(),
            linkers: vec![Linker {
                outcome_label: "blocked".into(),
                target_intent: "nothing resembles this".into(),
                resolved_target: None,
                resolution_score: 0.0,
            }],
            terminal_outcomes: vec![],
            source: NodeSource {
                kind: SourceKind::Tsg,
                document_id: "ext".into(),
            },
            executable_hint: None,
            provenance: vec![],
        };
        kb.upsert_nodes(vec![node], &HashEmbedder).await.unwrap();
        let unresolved = kb.neighbors("ext/S1", Some("blocked")).unwrap();
        assert_eq!(unresolved.len(), 1);
        assert!(unresolved[0].1.is_none());
    }

    #[tokio::test]
    async fn remove_document_unresolves_incoming_links() {
        let mut kb = linear_kb().await;
        let mut other = linear_nodes().remove(0);
        other.node_id = "other/S1".into();
        other.source.document_id = "other".into();
        other.linkers[0].resolved_target = Some("linear_chain/S2".into());
        kb.upsert_nodes(vec![other], &HashEmbedder).await.unwrap();
        let removed = kb.remove_document("linear_chain");
        assert_eq!(removed.len(), 3);
        assert_eq!(kb.len(), 1);
        assert!(kb.dangling_targets().is_empty());
        assert!(!kb.node("other/S1").unwrap().linkers[0].is_resolved());
    }

    #[tokio::test]
    async fn store_swaps_only_on_success() {
        let store = KbStore::new(Arc::new(HashEmbedder));
        store.upsert_nodes(linear_nodes()).await.unwrap();
        let before = store.snapshot();
        let result: Result<(), StoreError> = store
            .update(|mut kb, _| async move {
                kb.remove_document("linear_chain");
                Err(StoreError::EmptyIndex)
            })
            .await;
        assert!(result.is_err());
        assert_eq!(*store.snapshot(), *before);
        assert_eq!(
            store
                .retrieve_top_k("confirm frontend recovery", 1)
                .await
                .unwrap()[0]
                .node
                .node_id,
            "linear_chain/S3"
        );
    }
}

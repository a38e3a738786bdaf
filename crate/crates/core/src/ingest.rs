//! The TSG ingestion pipeline: parse, quality gate, compile, index, and
//! resolve linkers across the whole knowledge base, as one atomic update.

use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::kb_compiler::{
    compile, resolve_linkers, CompileError, ResolutionReport, DEFAULT_RESOLUTION_THRESHOLD,
};
use crate::kb_store::{KbStore, StoreError};
use crate::tsg_parser::{
    parse_structured_tsg, validate_quality, ParseError, QualityReport, StructuredTsg,
};

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Replace an already ingested TSG with the same id.
    pub replace: bool,
    pub resolution_threshold: f64,
    /// Save the updated knowledge base here before it becomes visible.
    pub persist_to: Option<PathBuf>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            replace: false,
            resolution_threshold: DEFAULT_RESOLUTION_THRESHOLD,
            persist_to: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub tsg_id: String,
    pub quality: QualityReport,
    pub nodes_added: usize,
    pub nodes_removed: usize,
    pub resolution: ResolutionReport,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("TSG {} fails quality checks", .0.tsg_id)]
    Quality(QualityReport),
    #[error("TSG {0} is already ingested")]
    Duplicate(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Quality and node counts of one TSG in a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DocumentReport {
    pub tsg_id: String,
    pub quality: QualityReport,
    pub nodes_added: usize,
    pub nodes_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub documents: Vec<DocumentReport>,
    /// One resolution pass over the whole knowledge base after the batch.
    pub resolution: ResolutionReport,
}

pub async fn ingest_document(
    store: &KbStore,
    document: &str,
    options: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let tsg = parse_structured_tsg(document)?;
    ingest_tsg(store, &tsg, options).await
}

pub async fn ingest_tsg(
    store: &KbStore,
    tsg: &StructuredTsg,
    options: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let mut batch = ingest_batch(store, std::slice::from_ref(tsg), options).await?;
    let document = batch
        .documents
        .pop()
        .expect("one document in, one report out");
    Ok(IngestReport {
        tsg_id: document.tsg_id,
        quality: document.quality,
        nodes_added: document.nodes_added,
        nodes_removed: document.nodes_removed,
        resolution: batch.resolution,
    })
}

/// Ingest several TSGs as one atomic update with a single linker
/// resolution pass at the end. Either every TSG lands or none does.
pub async fn ingest_batch(
    store: &KbStore,
    tsgs: &[StructuredTsg],
    options: &IngestOptions,
) -> Result<BatchReport, IngestError> {
    let mut compiled = Vec::with_capacity(tsgs.len());
    let mut seen = std::collections::HashSet::new();
    for tsg in tsgs {
        if !seen.insert(tsg.tsg_id.as_str()) {
            return Err(IngestError::Duplicate(tsg.tsg_id.clone()));
        }
        let quality = validate_quality(tsg);
        if !quality.passed {
            return Err(IngestError::Quality(quality));
        }
        compiled.push((tsg.tsg_id.clone(), quality, compile(tsg)?));
    }
    let options = options.clone();
    store
        .update(|mut kb, embedder| async move {
            let mut documents = Vec::with_capacity(compiled.len());
            for (tsg_id, quality, nodes) in compiled {
                let existing = kb.document_node_ids(&tsg_id);
                if !existing.is_empty() && !options.replace {
                    return Err(IngestError::Duplicate(tsg_id));
                }
                let nodes_removed = kb.remove_document(&tsg_id).len();
                let nodes_added = kb.upsert_nodes(nodes, embedder.as_ref()).await?;
                documents.push(DocumentReport {
                    tsg_id,
                    quality,
                    nodes_added,
                    nodes_removed,
                });
            }
            let resolution =
                resolve_linkers(&mut kb, embedder.as_ref(), options.resolution_threshold)
                    .await
                    .map_err(StoreError::from)?;
            if let Some(path) = &options.persist_to {
                kb.save(path)?;
            }
            Ok((
                kb,
                BatchReport {
                    documents,
                    resolution,
                },
            ))
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_provider::HashEmbedder;
    use std::sync::Arc;

    const LINEAR_CHAIN: &str = include_str!("../tests/fixtures/linear_chain.tsg.json");

    #[tokio::test]
    async fn ingest_then_duplicate_then_replace() {
        let store = KbStore::new(Arc::new(HashEmbedder));
        let report = ingest_document(&store, LINEAR_CHAIN, &IngestOptions::default())
            .await
            .unwrap();
        assert_eq!(report.nodes_added, 3);
        assert!(matches!(
            ingest_document(&store, LINEAR_CHAIN, &IngestOptions::default()).await,
            Err(IngestError::Duplicate(id)) if id == "linear_chain"
        ));
        let replace = IngestOptions {
            replace: true,
            ..Default::default()
        };
        let report = ingest_document(&store, LINEAR_CHAIN, &replace)
            .await
            .unwrap();
        assert_eq!((report.nodes_added, report.nodes_removed), (3, 3));
        assert_eq!(store.snapshot().len(), 3);
    }

    #[tokio::test]
    async fn quality_errors_reject_without_change() {
        let store = KbStore::new(Arc::new(HashEmbedder));
        let mut doc: serde_json::Value = serde_json::from_str(LINEAR_CHAIN).unwrap();
        doc["title"] = "".into();
        assert!(matches!(
            ingest_document(&store, &doc.to_string(), &IngestOptions::default()).await,
            Err(IngestError::Quality(_))
        ));
        assert!(store.snapshot().is_empty());
    }

    #[tokio::test]
    async fn batches_are_all_or_nothing() {
        let store = KbStore::new(Arc::new(HashEmbedder));
        let tsg = parse_structured_tsg(LINEAR_CHAIN).unwrap();
        let mut other = tsg.clone();
        other.tsg_id = "second_chain".into();
        let report = ingest_batch(&store, &[tsg.clone(), other], &IngestOptions::default())
            .await
            .unwrap();
        assert_eq!(report.documents.len(), 2);
        assert_eq!(store.snapshot().len(), 6);

        let mut fresh = tsg.clone();
        fresh.tsg_id = "third_chain".into();
        let err = ingest_batch(&store, &[fresh, tsg], &IngestOptions::default())
            .await
            .unwrap_err();
        assert!(matches!(err, IngestError::Duplicate(id) if id == "linear_chain"));
        assert_eq!(store.snapshot().len(), 6);
    }
}

mod common;

use common::*;
use mitigraph_core::kb_compiler::{
    apply_patches, enhance_from_history, EnhanceError, HistoryRecord, PatchPayload, SourceKind,
    DEFAULT_DUPLICATE_THRESHOLD, DEFAULT_RESOLUTION_THRESHOLD,
};
use mitigraph_core::llm_provider::SchemaId;
use mitigraph_core::{HashEmbedder, MockProvider, MockScript};
use serde_json::json;

const STALE: &str =
    "INC-1: lag again; the failover runbook is stale, we now promote via the control plane";
const NEW: &str = "INC-2: blocked failover; we drained writes first, then it went through";
const EMPTY: &str = "INC-3: false alarm, nothing done";

fn script() -> MockScript {
    let mut script = MockScript::default();
    script
        .respond(
            "history_enhancer",
            SchemaId::HistoryExtraction,
            STALE,
            json!({"candidates": [{
                "intent": "fail over primary database",
                "action": "Promote the replica through the control plane failover endpoint"
            }]}),
        )
        .respond(
            "history_enhancer",
            SchemaId::HistoryExtraction,
            NEW,
            json!({"candidates": [{
                "intent": "unblock a blocked database failover",
                "action": "Drain write traffic from the primary, then retry the failover",
                "outcome": "failover retried",
                "next_intent": "validate service health after database failover"
            }]}),
        )
        .respond(
            "history_enhancer",
            SchemaId::HistoryExtraction,
            EMPTY,
            json!({"candidates": []}),
        );
    script
}

fn record(id: &str, text: &str) -> HistoryRecord {
    HistoryRecord {
        discussion_id: id.into(),
        text: text.into(),
    }
}

#[tokio::test]
async fn history_yields_staged_patches_that_apply_cleanly() {
    let kb = crosstsg_kb().await.snapshot();
    let before = kb.to_jsonl();
    let provider = MockProvider::new(script());
    let patches = enhance_from_history(
        &[record("INC-1", STALE), record("INC-2", NEW)],
        &kb,
        &provider,
        &HashEmbedder,
        DEFAULT_DUPLICATE_THRESHOLD,
    )
    .await
    .unwrap();
    assert_eq!(patches.len(), 2);
    assert_eq!(
        kb.to_jsonl(),
        before,
        "extraction must not touch the knowledge base"
    );

    match &patches[0].payload {
        PatchPayload::UpdateAction { node_id, .. } => assert_eq!(node_id, "db_latency/S2"),
        other => panic!("expected an update, got {other:?}"),
    }
    assert_eq!(patches[0].similarity_to_existing, 1.0);
    let PatchPayload::NewNode { node } = &patches[1].payload else {
        panic!("expected a new node");
    };
    assert_eq!(node.source.kind, SourceKind::History);
    assert!(patches[1].similarity_to_existing < DEFAULT_DUPLICATE_THRESHOLD);

    let next = apply_patches(&patches, &kb, &HashEmbedder, DEFAULT_RESOLUTION_THRESHOLD)
        .await
        .unwrap();
    assert_eq!(next.len(), kb.len() + 1);
    let failover = next.node("db_latency/S2").unwrap();
    assert!(failover.action.contains("control plane"));
    assert_eq!(failover.provenance, ["INC-1"]);
    let mined = next.node(&node.node_id).unwrap();
    let link = mined.linker("failover retried").unwrap();
    assert_eq!(
        link.resolved_target.as_deref(),
        Some("service_validation/S1")
    );
    assert!(next.index().get(&node.node_id).is_some());
}

#[tokio::test]
async fn discussions_without_steps_are_reported() {
    let kb = crosstsg_kb().await.snapshot();
    let provider = MockProvider::new(script());
    let err = enhance_from_history(
        &[record("INC-3", EMPTY)],
        &kb,
        &provider,
        &HashEmbedder,
        0.9,
    )
    .await
    .unwrap_err();
    assert!(matches!(err, EnhanceError::ExtractionEmpty(1)));
    let none = enhance_from_history(&[], &kb, &provider, &HashEmbedder, 0.9)
        .await
        .unwrap();
    assert!(none.is_empty());
}

#[tokio::test]
async fn provider_outages_surface() {
    let kb = crosstsg_kb().await.snapshot();
    let provider = MockProvider::new(MockScript::default());
    let err = enhance_from_history(
        &[record("INC-9", "unscripted")],
        &kb,
        &provider,
        &HashEmbedder,
        0.9,
    )
    .await
    .unwrap_err();
    assert!(
        matches!(err, EnhanceError::Provider(_) | EnhanceError::Chat(_)),
        "{err}"
    );
}

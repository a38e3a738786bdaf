#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use mitigraph_core::clock::{LogicalClock, SequentialIds};
use mitigraph_core::ingest::{ingest_document, IngestOptions};
use mitigraph_core::orchestrator::{EventLog, MemoryLog};
use mitigraph_core::{KbStore, MockProvider, MockScript, Orchestrator, PluginRegistry};

pub fn crosstsg_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/crosstsg")
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(crosstsg_dir().join(name)).unwrap()
}

pub const CROSSTSG_TSGS: [&str; 3] = [
    "db_latency.tsg.json",
    "service_validation.tsg.json",
    "frontend_recovery.tsg.json",
];

pub async fn crosstsg_kb() -> Arc<KbStore> {
    let store = KbStore::new(Arc::new(mitigraph_core::HashEmbedder));
    for name in CROSSTSG_TSGS {
        ingest_document(&store, &read_fixture(name), &IngestOptions::default())
            .await
            .unwrap();
    }
    Arc::new(store)
}

pub fn crosstsg_registry() -> Arc<PluginRegistry> {
    let mut registry = PluginRegistry::new();
    registry
        .register_manifest_json("plugins.json", &read_fixture("plugins.json"))
        .unwrap();
    Arc::new(registry)
}

pub fn crosstsg_script() -> MockScript {
    MockScript::from_json(&read_fixture("mock.json")).unwrap()
}

pub fn orchestrator(
    kb: Arc<KbStore>,
    registry: Arc<PluginRegistry>,
    script: MockScript,
) -> Orchestrator {
    orchestrator_with_log(kb, registry, script, Arc::new(MemoryLog::new()))
}

pub fn orchestrator_with_log(
    kb: Arc<KbStore>,
    registry: Arc<PluginRegistry>,
    script: MockScript,
    log: Arc<dyn EventLog>,
) -> Orchestrator {
    Orchestrator::new(kb, registry, Arc::new(MockProvider::new(script)))
        .with_log(log)
        .with_clock(Arc::new(LogicalClock::default()))
        .with_ids(Arc::new(SequentialIds::new("session")))
}

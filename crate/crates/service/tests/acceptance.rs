//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::future::Future;
use std::io::{BufRead, BufReader};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mitigraph_core::agents::{plan_actions, post_process, Memory};
use mitigraph_core::clock::{LogicalClock, SequentialIds};
use mitigraph_core::execution_engine::{Echo, Plugin, PluginManifest};
use mitigraph_core::ingest::{ingest_batch, ingest_document, IngestOptions};
use mitigraph_core::llm_provider::SchemaId;
use mitigraph_core::orchestrator::{
    replay, to_jsonl, EscalationReason, EventPayload, MemoryLog, Transition,
};
use mitigraph_core::{
    parse_structured_tsg, ActionPlan, HashEmbedder, KbStore, KnowledgeBase, MockProvider,
    MockScript, Orchestrator, PluginRegistry, SessionEvent, SessionState, StepMode,
};
use mitigraph_service::script::ChatScript;
use mitigraph_service::ApiSessionView;
use mitigraph_testkit as kit;
use rand::Rng;
use serde_json::{json, Value};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn crosstsg_script() -> ChatScript {
    ChatScript::load(&fixtures().join("crosstsg/crosstsg_session.json")).unwrap()
}

fn plans_in(events: &[SessionEvent]) -> Vec<ActionPlan> {
    events
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::StateChange {
                transition: Transition::PlanReady { plan },
                ..
            } => Some(plan.clone()),
            _ => None,
        })
        .collect()
}

/// Step index and whether it ran automatically, for every insight event.
fn insights_in(events: &[SessionEvent]) -> Vec<(usize, bool)> {
    events
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::AutoInsight { insight } => Some((insight.step_index, true)),
            EventPayload::ManualResult { insight } => Some((insight.step_index, false)),
            _ => None,
        })
        .collect()
}

fn deterministic(store: KbStore, registry: PluginRegistry, mock: MockScript) -> Orchestrator {
    Orchestrator::new(
        Arc::new(store),
        Arc::new(registry),
        Arc::new(MockProvider::new(mock)),
    )
    .with_log(Arc::new(MemoryLog::new()))
    .with_clock(Arc::new(LogicalClock::default()))
    .with_ids(Arc::new(SequentialIds::new("session")))
}

async fn cross_tsg_flow() -> Outcome {
    let script = crosstsg_script();
    let store = KbStore::new(Arc::new(HashEmbedder));
    let tsgs: Vec<_> = script
        .tsgs
        .iter()
        .map(|p| parse_structured_tsg(&std::fs::read_to_string(p).unwrap()).unwrap())
        .collect();
    ingest_batch(&store, &tsgs, &IngestOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let graph = store.snapshot().graph();
    let edge = graph
        .edges
        .iter()
        .find(|e| e.from == "db_latency/S2" && e.to == "service_validation/S1")
        .ok_or("no db_latency/S2 -> service_validation/S1 edge")?;
    ensure!(edge.score == 1.0, "edge score {}", edge.score);
    ensure!(edge.cross_tsg, "edge not marked cross-guide");

    let outcome = script.run().await.map_err(|e| e.to_string())?;
    ensure!(
        outcome.session.state == SessionState::Resolved,
        "ended {}",
        outcome.session.state
    );
    let visited: Vec<String> = plans_in(&outcome.events)
        .iter()
        .flat_map(|p| p.steps.iter().filter_map(|s| s.node_id.clone()))
        .collect();
    let last_a = visited.iter().rposition(|n| n.starts_with("db_latency/"));
    let first_b = visited
        .iter()
        .position(|n| n.starts_with("service_validation/"));
    ensure!(
        matches!((last_a, first_b), (Some(a), Some(b)) if a < b),
        "session did not move from db_latency into service_validation: {visited:?}"
    );
    Ok(())
}

async fn retrieval_oracle() -> Outcome {
    let mut rng = kit::rng(7);
    let corpus: Vec<(String, String)> = (0..500)
        .map(|i| (format!("corpus/N{i:03}"), kit::random_intent(&mut rng)))
        .collect();
    let mut kb = KnowledgeBase::for_embedder(&HashEmbedder);
    kb.upsert_nodes(
        corpus
            .iter()
            .map(|(id, intent)| kit::synthetic_node(id, intent))
            .collect(),
        &HashEmbedder,
    )
    .await
    .map_err(|e| e.to_string())?;
    for q in 0..50 {
        let query = kit::random_intent(&mut rng);
        let got = kb
            .retrieve_top_k(&query, 5, &HashEmbedder)
            .await
            .map_err(|e| e.to_string())?;
        let expected = kit::exact_hash_top_k(&corpus, &query, 5);
        ensure!(
            got.len() == expected.len(),
            "query {q}: {} results, oracle {}",
            got.len(),
            expected.len()
        );
        for (g, (id, score)) in got.iter().zip(&expected) {
            ensure!(
                &g.node.node_id == id,
                "query {q}: {} ranked where oracle has {id}",
                g.node.node_id
            );
            ensure!(
                (g.score - score).abs() <= 1e-9,
                "query {q}: score {} vs {score}",
                g.score
            );
        }
    }
    Ok(())
}

async fn semi_automation_split() -> Outcome {
    let script = ChatScript::load(&fixtures().join("frontend/session.json")).unwrap();
    let orch = script.orchestrator().await.map_err(|e| e.to_string())?;
    let id = orch
        .start_session()
        .await
        .map_err(|e| e.to_string())?
        .session_id;
    orch.submit_message(&id, "frontend is flapping, restart it")
        .await
        .map_err(|e| e.to_string())?;
    let s = orch.run(&id).await.map_err(|e| e.to_string())?;
    let modes: Vec<StepMode> = s
        .current_plan
        .as_ref()
        .ok_or("no plan")?
        .steps
        .iter()
        .map(|s| s.mode)
        .collect();
    ensure!(
        modes == [StepMode::Auto, StepMode::Manual, StepMode::Auto],
        "plan modes {modes:?}"
    );
    ensure!(
        s.state == SessionState::AwaitingManualResult && s.cursor == 1,
        "paused in {} at step {}",
        s.state,
        s.cursor
    );
    let events = orch.events(&id).map_err(|e| e.to_string())?;
    ensure!(
        insights_in(&events) == [(0, true)],
        "before the pause: {:?}",
        insights_in(&events)
    );

    orch.submit_manual_result(&id, "restarted fe-03, done")
        .await
        .map_err(|e| e.to_string())?;
    let s = orch.run(&id).await.map_err(|e| e.to_string())?;
    ensure!(s.state == SessionState::Resolved, "ended {}", s.state);
    let events = orch.events(&id).map_err(|e| e.to_string())?;
    let insights = insights_in(&events);
    ensure!(
        insights == [(0, true), (1, false), (2, true)],
        "insight events {insights:?}"
    );
    Ok(())
}

async fn out_of_scope_escalation() -> Outcome {
    let script = crosstsg_script();
    let mut mock = MockScript::load(&script.mock).unwrap();
    mock.respond(
        "intent_interpreter",
        SchemaId::IntentResult,
        "the coffee machine is leaking",
        json!({"kind": "clarified", "clarified_intent": "repair the office coffee machine"}),
    )
    .respond(
        "node_selector",
        SchemaId::NodeSelection,
        "repair the office coffee machine",
        json!({"selected": []}),
    );
    let store = KbStore::new(Arc::new(HashEmbedder));
    for path in &script.tsgs {
        ingest_document(
            &store,
            &std::fs::read_to_string(path).unwrap(),
            &IngestOptions::default(),
        )
        .await
        .map_err(|e| e.to_string())?;
    }
    let mut registry = PluginRegistry::new();
    for path in &script.plugins {
        registry
            .register_manifest_file(path)
            .map_err(|e| e.to_string())?;
    }
    let orch = deterministic(store, registry, mock);
    let id = orch
        .start_session()
        .await
        .map_err(|e| e.to_string())?
        .session_id;
    orch.submit_message(&id, "the coffee machine is leaking")
        .await
        .map_err(|e| e.to_string())?;
    let s = orch.run(&id).await.map_err(|e| e.to_string())?;
    ensure!(s.state == SessionState::Escalated, "ended {}", s.state);
    let reason = s.escalation.as_ref().map(|e| e.reason);
    ensure!(
        reason == Some(EscalationReason::OutOfScope),
        "escalation reason {reason:?}"
    );
    let events = orch.events(&id).map_err(|e| e.to_string())?;
    ensure!(
        plans_in(&events).is_empty() && s.memory.plans.is_empty(),
        "a plan was created"
    );
    ensure!(s.current_plan.is_none(), "session holds a plan");
    Ok(())
}

async fn deterministic_replay() -> Outcome {
    let script = crosstsg_script();
    let first = script.run().await.map_err(|e| e.to_string())?;
    let reference = to_jsonl(&first.events);
    let replayed = replay(&first.events).map_err(|e| e.to_string())?;
    ensure!(
        replayed == first.session,
        "replay differs from the final session"
    );
    for run in 1..100 {
        let again = script.run().await.map_err(|e| e.to_string())?;
        ensure!(
            to_jsonl(&again.events) == reference,
            "run {run} produced a different event log"
        );
        ensure!(
            replay(&again.events).map_err(|e| e.to_string())? == again.session,
            "run {run} replay differs"
        );
    }
    Ok(())
}

const LOOP_TSG: &str = r#"{
  "tsg_id": "loop", "title": "Endless retry", "background": "Retries forever.",
  "terminology": {}, "faq": [], "appendix": "",
  "flow": [{"step_id": "S1", "intent": "retry the flaky job", "action": "Retry the flaky job once more",
            "outcomes": {"again": {"step": "S1"}}, "executable_hint": "echo"}]
}"#;

async fn budget_exhaustion() -> Outcome {
    let store = KbStore::new(Arc::new(HashEmbedder));
    ingest_document(&store, LOOP_TSG, &IngestOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let mut registry = PluginRegistry::new();
    registry
        .register(Plugin::new(
            PluginManifest::new("echo", "returns input").with_pattern("again", "again"),
            Echo,
        ))
        .map_err(|e| e.to_string())?;
    let mut mock = MockScript::default();
    mock.default_for("intent_interpreter", json!({"kind": "clarified", "clarified_intent": "retry the flaky job"}))
        .default_for("node_selector", json!({"selected": ["loop/S1"]}))
        .default_for(
            "action_planner",
            json!({"steps": [{"node_id": "loop/S1", "action": "Retry the flaky job once more, again", "plugin": "echo"}]}),
        )
        .default_for("post_processor", json!({"revisions": []}));
    let orch = deterministic(store, registry, mock);
    let id = orch
        .start_session()
        .await
        .map_err(|e| e.to_string())?
        .session_id;
    orch.submit_message(&id, "job keeps failing")
        .await
        .map_err(|e| e.to_string())?;
    let s = orch.run(&id).await.map_err(|e| e.to_string())?;
    ensure!(s.state == SessionState::Escalated, "ended {}", s.state);
    let reason = s.escalation.as_ref().map(|e| e.reason);
    ensure!(
        reason == Some(EscalationReason::BudgetExhausted),
        "escalation reason {reason:?}"
    );
    ensure!(s.max_iterations == 20, "budget {}", s.max_iterations);
    ensure!(s.iteration_count == 20, "iterations {}", s.iteration_count);
    let plans = plans_in(&orch.events(&id).map_err(|e| e.to_string())?).len();
    ensure!(plans == 20, "{plans} planning cycles");
    Ok(())
}

async fn compiler_conservation() -> Outcome {
    let mut rng = kit::rng(2024);
    let docs = kit::random_tsg_documents(&mut rng, 200, true);
    let tsgs: Vec<_> = docs
        .iter()
        .map(|d| parse_structured_tsg(d).unwrap())
        .collect();
    let steps: usize = tsgs.iter().map(|t| t.flow.len()).sum();
    let store = KbStore::new(Arc::new(HashEmbedder));
    ingest_batch(&store, &tsgs, &IngestOptions::default())
        .await
        .map_err(|e| e.to_string())?;
    let kb = store.snapshot();
    ensure!(
        kb.len() == steps,
        "{} nodes for {steps} flow steps",
        kb.len()
    );
    let dangling = kit::dangling_edges(&kb);
    ensure!(dangling.is_empty(), "dangling targets {dangling:?}");
    Ok(())
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn spawn(config: &Path) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_mitigraph"))
            .args(["--config", &config.display().to_string(), "serve"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected server banner {line:?}"))?
            .to_string();
        Ok(Self { child, base })
    }

    /// SIGKILL: the process gets no chance to flush or shut down cleanly.
    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

async fn call(req: reqwest::RequestBuilder) -> Result<Value, String> {
    let response = req.send().await.map_err(|e| e.to_string())?;
    let status = response.status();
    let body: Value = response.json().await.map_err(|e| e.to_string())?;
    ensure!(status.is_success(), "HTTP {status}: {body}");
    Ok(body)
}

async fn crash_durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let frontend = fixtures().join("frontend");
    let config = dir.path().join("service.toml");
    std::fs::write(
        &config,
        format!(
            "data_dir = {:?}\nlisten = \"127.0.0.1:0\"\nplugins = [{:?}]\n\n[provider]\nkind = \"mock\"\nscript = {:?}\n",
            dir.path().join("data").display().to_string(),
            frontend.join("plugins.json").display().to_string(),
            frontend.join("mock.json").display().to_string(),
        ),
    )
    .map_err(|e| e.to_string())?;

    let http = reqwest::Client::new();
    let server = Server::spawn(&config)?;
    let base = server.base.clone();
    let tsg = std::fs::read_to_string(frontend.join("linear_chain.tsg.json")).unwrap();
    call(http.post(format!("{base}/tsgs")).body(tsg)).await?;
    let created = call(http.post(format!("{base}/sessions"))).await?;
    let id = created["session_id"]
        .as_str()
        .ok_or("no session id")?
        .to_string();
    let message = json!({"text": "frontend is flapping, restart it"}).to_string();
    call(
        http.post(format!("{base}/sessions/{id}/messages"))
            .body(message),
    )
    .await?;
    call(http.post(format!("{base}/sessions/{id}/advance?auto=true"))).await?;
    let before_raw = call(http.get(format!("{base}/sessions/{id}"))).await?;
    let before: ApiSessionView =
        serde_json::from_value(before_raw.clone()).map_err(|e| e.to_string())?;
    ensure!(
        before.state == SessionState::AwaitingManualResult,
        "pre-kill state {}",
        before.state
    );
    server.kill();

    let server = Server::spawn(&config)?;
    let base = server.base.clone();
    let after_raw = call(http.get(format!("{base}/sessions/{id}"))).await?;
    let after: ApiSessionView =
        serde_json::from_value(after_raw.clone()).map_err(|e| e.to_string())?;
    ensure!(
        after == before,
        "restored view differs:\nbefore {before:?}\nafter  {after:?}"
    );
    ensure!(after_raw == before_raw, "restored JSON differs");

    let result = json!({"text": "restarted, done"}).to_string();
    call(
        http.post(format!("{base}/sessions/{id}/results"))
            .body(result),
    )
    .await?;
    let finished = call(http.post(format!("{base}/sessions/{id}/advance?auto=true"))).await?;
    ensure!(
        finished["state"] == "Resolved",
        "resumed session ended {}",
        finished["state"]
    );
    Ok(())
}

/// Revisions an expert might send, including ones that try to change what
/// the post-processor must leave alone.
fn adversarial_reviews(plan: &ActionPlan, rng: &mut impl Rng) -> Vec<Value> {
    let n = plan.steps.len();
    let mut reviews = vec![
        json!({"revisions": []}),
        json!({"revisions": [{"step_index": 0, "action": "Rewritten by the expert"}]}),
        json!({"revisions": [{"step_index": 0, "expected_outcomes": ["fixed", "still broken"]}]}),
        json!({"revisions": [{"step_index": 0, "mode": "manual", "plugin": null}]}),
        json!({"revisions": [{"step_index": 0, "node_id": "elsewhere/S9"}]}),
        json!({"revisions": [{"step_index": n, "action": "a step that does not exist"}]}),
        json!({"revisions": [{"step_index": 0, "action": "   "}]}),
        json!({"revisions": [{"step_index": 0, "action": "a"}, {"step_index": 0, "action": "b"}]}),
        json!({"steps": []}),
        json!("free text instead of a review"),
    ];
    for _ in 0..20 {
        let revisions: Vec<Value> = (0..rng.random_range(0..4))
            .map(|_| {
                let mut r = json!({"step_index": rng.random_range(0..n + 1)});
                if rng.random_bool(0.7) {
                    r["action"] = json!(kit::random_intent(rng));
                }
                if rng.random_bool(0.4) {
                    r["expected_outcomes"] = json!([kit::random_intent(rng)]);
                }
                if rng.random_bool(0.1) {
                    r["plugin"] = json!("run_health_probe");
                }
                r
            })
            .collect();
        reviews.push(json!({ "revisions": revisions }));
    }
    reviews
}

async fn post_processor_conservation() -> Outcome {
    let mut rng = kit::rng(9);
    let mut checked = 0;
    for script_path in [
        "crosstsg/crosstsg_session.json",
        "frontend/session.json",
        "frontend/auto_session.json",
    ] {
        let script = ChatScript::load(&fixtures().join(script_path)).unwrap();
        let outcome = script.run().await.map_err(|e| e.to_string())?;
        let orch = script.orchestrator().await.map_err(|e| e.to_string())?;
        let kb = orch.kb().snapshot();
        let mock = MockScript::load(&script.mock).unwrap();
        let planner = MockProvider::new(mock);
        for reviewed in plans_in(&outcome.events) {
            let selected: Vec<_> = reviewed
                .source_nodes
                .iter()
                .map(|id| kb.node(id).unwrap().clone())
                .collect();
            let draft = plan_actions(&selected, &Memory::new(&[], &[]), orch.registry(), &planner)
                .await
                .map_err(|e| e.to_string())?;
            kit::plan_conserved(&draft, &reviewed).map_err(|e| format!("{script_path}: {e}"))?;
            for review in adversarial_reviews(&draft, &mut rng) {
                let mut expert = MockScript::default();
                expert.default_for("post_processor", review.clone());
                let out = post_process(&draft, &MockProvider::new(expert)).await;
                kit::plan_conserved(&draft, &out)
                    .map_err(|e| format!("{script_path} with {review}: {e}"))?;
                checked += 1;
            }
        }
    }
    ensure!(checked > 0, "no plans were checked");
    Ok(())
}

struct Criterion {
    number: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> std::pin::Pin<Box<dyn Future<Output = Outcome>>>,
}

fn main() {
    let criteria = [
        Criterion {
            number: 1,
            name: "cross-guide mitigation flow",
            limit: Some(Duration::from_secs(5)),
            run: || Box::pin(cross_tsg_flow()),
        },
        Criterion {
            number: 2,
            name: "retrieval matches brute-force oracle",
            limit: Some(Duration::from_secs(2)),
            run: || Box::pin(retrieval_oracle()),
        },
        Criterion {
            number: 3,
            name: "auto/manual/auto split",
            limit: Some(Duration::from_secs(5)),
            run: || Box::pin(semi_automation_split()),
        },
        Criterion {
            number: 4,
            name: "out-of-scope escalation",
            limit: None,
            run: || Box::pin(out_of_scope_escalation()),
        },
        Criterion {
            number: 5,
            name: "deterministic replay x100",
            limit: Some(Duration::from_secs(60)),
            run: || Box::pin(deterministic_replay()),
        },
        Criterion {
            number: 6,
            name: "budget exhaustion at 20",
            limit: None,
            run: || Box::pin(budget_exhaustion()),
        },
        Criterion {
            number: 7,
            name: "compiler conservation and closure",
            limit: Some(Duration::from_secs(10)),
            run: || Box::pin(compiler_conservation()),
        },
        Criterion {
            number: 8,
            name: "crash durability",
            limit: None,
            run: || Box::pin(crash_durability()),
        },
        Criterion {
            number: 9,
            name: "post-processor conservation",
            limit: None,
            run: || Box::pin(post_processor_conservation()),
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for c in criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| c.name.contains(f.as_str()) || *f == c.number.to_string())
        {
            continue;
        }
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        let started = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(|| runtime.block_on((c.run)())))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let elapsed = started.elapsed();
        drop(runtime);
        let result = result.and_then(|()| match c.limit {
            Some(limit) if elapsed > limit => Err(format!("took {elapsed:?}, limit {limit:?}")),
            _ => Ok(()),
        });
        let limit = c
            .limit
            .map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        match result {
            Ok(()) => println!(
                "criterion {}: PASS {} ({:.0} ms{limit})",
                c.number,
                c.name,
                elapsed.as_secs_f64() * 1e3
            ),
            Err(why) => {
                failures += 1;
                println!(
                    "criterion {}: FAIL {} ({:.0} ms{limit}): {why}",
                    c.number,
                    c.name,
                    elapsed.as_secs_f64() * 1e3
                );
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

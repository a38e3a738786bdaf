//! Random corpora and slow, obviously-correct reference implementations
//! used to cross-check the engine in tests.

use std::collections::{BTreeSet, HashMap};

use mitigraph_core::tsg_parser::{OutcomeTarget, StructuredTsg};
use mitigraph_core::KnowledgeBase;
use petgraph::graphmap::DiGraphMap;
use petgraph::visit::Bfs;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const VERBS: &[&str] = &[
    "restart",
    "drain",
    "fail over",
    "scale out",
    "rotate",
    "inspect",
    "roll back",
    "throttle",
    "reindex",
    "flush",
];
const OBJECTS: &[&str] = &[
    "primary database",
    "frontend pool",
    "cache cluster",
    "message queue",
    "storage account",
    "dns zone",
    "certificate store",
    "load balancer",
    "auth service",
    "billing worker",
    "search index",
    "api gateway",
];
const QUALIFIERS: &[&str] = &[
    "in west europe",
    "after deployment",
    "under high latency",
    "for tenant traffic",
    "on canary nodes",
    "during peak hours",
    "with stale config",
    "behind the firewall",
];

/// A short imperative intent such as "drain cache cluster on canary nodes".
pub fn random_intent(rng: &mut impl Rng) -> String {
    format!(
        "{} {} {}",
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap(),
        QUALIFIERS.choose(rng).unwrap()
    )
}

/// `count` structurally valid TSG documents with random outcome graphs
/// (cycles allowed). Roughly a third of outcomes point at the entry intent
/// of some other generated TSG verbatim and a few at intents nobody owns.
/// With `connected`, each step also links to the next one so every step is
/// reachable from the entry.
pub fn random_tsg_documents(rng: &mut impl Rng, count: usize, connected: bool) -> Vec<String> {
    let entries: Vec<String> = (0..count)
        .map(|i| format!("{} #{i}", random_intent(rng)))
        .collect();
    (0..count)
        .map(|i| {
            let steps = rng.random_range(1..=8usize);
            let mut flow = Vec::with_capacity(steps);
            for s in 0..steps {
                let intent = if s == 0 { entries[i].clone() } else { format!("{} step {s}", random_intent(rng)) };
                let mut outcomes = Map::new();
                for o in 0..rng.random_range(0..=3usize) {
                    let target = match rng.random_range(0..6u8) {
                        0 | 1 if steps > 1 => json!({"step": format!("S{}", rng.random_range(0..steps))}),
                        2 | 3 if count > 1 => {
                            let other = (i + rng.random_range(1..count)) % count;
                            json!({"external_intent": entries[other]})
                        }
                        4 => json!({"external_intent": format!("nobody owns this {}", random_intent(rng))}),
                        _ => json!("TERMINAL"),
                    };
                    outcomes.insert(format!("outcome {o}"), target);
                }
                if connected && s + 1 < steps {
                    outcomes.insert("next".to_string(), json!({"step": format!("S{}", s + 1)}));
                }
                flow.push(json!({
                    "step_id": format!("S{s}"),
                    "intent": intent,
                    "action": format!("Carefully {}", random_intent(rng)),
                    "outcomes": outcomes,
                    "executable_hint": Value::Null,
                }));
            }
            json!({
                "tsg_id": format!("gen_{i:03}"),
                "title": format!("Generated guide {i}"),
                "background": "Synthetic guide for property tests.",
                "terminology": {},
                "faq": [],
                "flow": flow,
                "appendix": "",
            })
            .to_string()
        })
        .collect()
}

/// Step ids reachable from the first flow step, by breadth-first search
/// over an explicit graph of internal references.
pub fn reachable_steps(tsg: &StructuredTsg) -> BTreeSet<String> {
    let mut graph = DiGraphMap::<&str, ()>::new();
    for step in &tsg.flow {
        graph.add_node(step.step_id.as_str());
        for (_, target) in step.outcomes.iter() {
            if let OutcomeTarget::Step(next) = target {
                graph.add_edge(step.step_id.as_str(), next.as_str(), ());
            }
        }
    }
    let Some(entry) = tsg.flow.first() else {
        return BTreeSet::new();
    };
    let mut bfs = Bfs::new(&graph, entry.step_id.as_str());
    let mut seen = BTreeSet::new();
    while let Some(n) = bfs.next(&graph) {
        seen.insert(n.to_string());
    }
    seen
}

/// Resolved targets that name no node in `kb`, as `(node_id, target)`.
pub fn dangling_edges(kb: &KnowledgeBase) -> Vec<(String, String)> {
    let ids: BTreeSet<&str> = kb.nodes().map(|n| n.node_id.as_str()).collect();
    kb.nodes()
        .flat_map(|n| {
            n.linkers
                .iter()
                .filter_map(|l| l.resolved_target.as_deref())
                .filter(|t| !ids.contains(t))
                .map(|t| (n.node_id.clone(), t.to_string()))
        })
        .collect()
}

/// Rank every entry by cosine similarity, computed from scratch with
/// explicit norms, and keep the best `k`. Ties go to the smaller id, but
/// only exact float ties count; see [`exact_hash_top_k`] for text corpora.
pub fn brute_force_top_k(
    entries: &HashMap<String, Vec<f64>>,
    query: &[f64],
    k: usize,
) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (id.clone(), dot / (norm(v) * qn))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn fnv1a(s: &str) -> u64 {
    const OFFSET: u64 = 14695981039346656037;
    const PRIME: u64 = 1099511628211;
    s.bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Unnormalized "hash-v1" bucket counts: lowercase char trigrams, 64-bit
/// FNV-1a, bucket `h mod 256`, sign from the high bit. `None` when every
/// bucket cancels to zero.
pub fn reference_hash_counts(text: &str) -> Option<[i64; 256]> {
    let lower: Vec<char> = text.to_lowercase().chars().collect();
    let grams: Vec<String> = if lower.len() < 3 {
        vec![lower.iter().collect()]
    } else {
        (0..=lower.len() - 3)
            .map(|i| lower[i..i + 3].iter().collect())
            .collect()
    };
    let mut v = [0i64; 256];
    for g in &grams {
        let h = fnv1a(g);
        v[(h & 0xff) as usize] += if h & (1 << 63) != 0 { -1 } else { 1 };
    }
    v.iter().any(|&x| x != 0).then_some(v)
}

/// Second implementation of the "hash-v1" embedding, unit L2 norm.
pub fn reference_hash_embedding(text: &str) -> Vec<f64> {
    let Some(v) = reference_hash_counts(text) else {
        let mut unit = vec![0.0; 256];
        unit[(fnv1a(text) & 0xff) as usize] = 1.0;
        return unit;
    };
    let norm = (v.iter().map(|x| (x * x) as f64).sum::<f64>()).sqrt();
    v.iter().map(|&x| x as f64 / norm).collect()
}

/// Top-k `(id, cosine)` of `corpus` against `query` under the hash
/// embedding, ranked in exact integer arithmetic so that ties are real
/// ties and go to the smaller id. Texts whose counts cancel are skipped.
pub fn exact_hash_top_k(corpus: &[(String, String)], query: &str, k: usize) -> Vec<(String, f64)> {
    let q = reference_hash_counts(query).expect("query must not cancel");
    let qn: i128 = q.iter().map(|x| (*x as i128).pow(2)).sum();
    let mut scored: Vec<(String, i128, i128)> = corpus
        .iter()
        .filter_map(|(id, text)| {
            let v = reference_hash_counts(text)?;
            let dot: i128 = v
                .iter()
                .zip(&q)
                .map(|(a, b)| (*a as i128) * (*b as i128))
                .sum();
            let norm: i128 = v.iter().map(|x| (*x as i128).pow(2)).sum();
            Some((id.clone(), dot, norm))
        })
        .collect();
    // dot_a / sqrt(n_a) against dot_b / sqrt(n_b): compare signs, then squares.
    scored.sort_by(|(ia, da, na), (ib, db, nb)| {
        let key = |d: i128, n_other: i128| d.signum() * d * d * n_other;
        key(*db, *na).cmp(&key(*da, *nb)).then_with(|| ia.cmp(ib))
    });
    scored
        .into_iter()
        .take(k)
        .map(|(id, dot, norm)| (id, dot as f64 / ((norm * qn) as f64).sqrt()))
        .collect()
}

/// A terminal TSG node with the given intent, for retrieval corpora.
pub fn synthetic_node(node_id: &str, intent: &str) -> mitigraph_core::KnowledgeNode {
    use mitigraph_core::kb_compiler::{NodeSource, SourceKind};
    mitigraph_core::KnowledgeNode {
        node_id: node_id.to_string(),
        node_type: mitigraph_core::NodeType::Terminal,
        intent: intent.to_string(),
        action: format!("Follow the runbook to {intent}"),
        linkers: Vec::new(),
        terminal_outcomes: Vec::new(),
        source: NodeSource {
            kind: SourceKind::Tsg,
            document_id: node_id.split('/').next().unwrap_or(node_id).to_string(),
        },
        executable_hint: None,
        provenance: Vec::new(),
    }
}

/// Whether `after` only differs from `before` in step actions and expected
/// outcomes. Failures name the first differing field.
pub fn plan_conserved(
    before: &mitigraph_core::ActionPlan,
    after: &mitigraph_core::ActionPlan,
) -> Result<(), String> {
    if before.steps.len() != after.steps.len() {
        return Err(format!(
            "step count {} became {}",
            before.steps.len(),
            after.steps.len()
        ));
    }
    if before.source_nodes != after.source_nodes {
        return Err("source_nodes changed".into());
    }
    for (a, b) in before.steps.iter().zip(&after.steps) {
        let field = if a.step_index != b.step_index {
            "step_index"
        } else if a.mode != b.mode {
            "mode"
        } else if a.plugin != b.plugin {
            "plugin"
        } else if a.node_id != b.node_id {
            "node_id"
        } else {
            continue;
        };
        return Err(format!("step {} changed {field}", a.step_index));
    }
    Ok(())
}

//! `kb.jsonl`: a meta header line, one `node` record per node, then one
//! `vec` record per node, all in node id order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IntentIndex, KnowledgeBase, StoreError, NORM_TOLERANCE};
use crate::kb_compiler::KnowledgeNode;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta {
        embedder_id: String,
        dim: usize,
    },
    Node(KnowledgeNode),
    #[serde(rename = "vec")]
    Vector {
        node_id: String,
        v: Vec<f64>,
    },
}

pub(super) fn to_jsonl(kb: &KnowledgeBase) -> String {
    let mut out = String::new();
    let mut push = |record: &Record| {
        out.push_str(&serde_json::to_string(record).expect("records serialize"));
        out.push('\n');
    };
    push(&Record::Meta {
        embedder_id: kb.index.embedder_id.clone(),
        dim: kb.index.dim,
    });
    for node in kb.nodes.values() {
        push(&Record::Node(node.clone()));
    }
    for (node_id, v) in &kb.index.entries {
        push(&Record::Vector {
            node_id: node_id.clone(),
            v: v.clone(),
        });
    }
    out
}

pub(super) fn from_jsonl(
    text: &str,
    expected_embedder_id: &str,
) -> Result<KnowledgeBase, StoreError> {
    let format = |line: usize, message: String| StoreError::Format { line, message };
    let mut kb: Option<KnowledgeBase> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(line).map_err(|e| format(line_no, e.to_string()))?;
        match (record, kb.as_mut()) {
            (Record::Meta { embedder_id, dim }, None) => {
                if embedder_id != expected_embedder_id {
                    return Err(StoreError::EmbedderMismatch {
                        expected: expected_embedder_id.to_string(),
                        found: embedder_id,
                    });
                }
                kb = Some(KnowledgeBase {
                    nodes: Default::default(),
                    index: IntentIndex::new(embedder_id, dim),
                });
            }
            (Record::Meta { .. }, Some(_)) => {
                return Err(format(line_no, "duplicate meta record".into()))
            }
            (_, None) => return Err(format(line_no, "first record must be meta".into())),
            (Record::Node(node), Some(kb)) => {
                node.check_invariants()
                    .map_err(|e| format(line_no, e.to_string()))?;
                if kb.nodes.insert(node.node_id.clone(), node).is_some() {
                    return Err(format(line_no, "duplicate node record".into()));
                }
            }
            (Record::Vector { node_id, v }, Some(kb)) => {
                if v.len() != kb.index.dim {
                    return Err(format(
                        line_no,
                        format!(
                            "vector has {} dimensions, expected {}",
                            v.len(),
                            kb.index.dim
                        ),
                    ));
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(format(
                        line_no,
                        format!("vector for {node_id} has norm {norm}"),
                    ));
                }
                if kb.index.entries.insert(node_id.clone(), v).is_some() {
                    return Err(format(line_no, format!("duplicate vector for {node_id}")));
                }
            }
        }
    }
    let kb = kb.ok_or_else(|| format(0, "missing meta record".into()))?;
    let total = text.lines().count();
    if let Some(id) = kb
        .nodes
        .keys()
        .find(|id| !kb.index.entries.contains_key(*id))
    {
        return Err(format(total, format!("node {id} has no vector record")));
    }
    if let Some(id) = kb
        .index
        .entries
        .keys()
        .find(|id| !kb.nodes.contains_key(*id))
    {
        return Err(format(
            total,
            format!("vector record for unknown node {id}"),
        ));
    }
    Ok(kb)
}

pub(super) fn save(kb: &KnowledgeBase, path: &Path) -> Result<(), StoreError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("kb.jsonl")
    ));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(to_jsonl(kb).as_bytes())?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

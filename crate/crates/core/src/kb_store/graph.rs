//! Node/edge export of the resolved graph, as JSON or Graphviz DOT.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::KnowledgeBase;
use crate::kb_compiler::NodeType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub node_type: NodeType,
    pub intent: String,
    pub document_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub outcome_label: String,
    pub score: f64,
    /// Source and target come from different documents.
    pub cross_tsg: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KbGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl KbGraph {
    pub(super) fn from_kb(kb: &KnowledgeBase) -> Self {
        let nodes = kb
            .nodes()
            .map(|n| GraphNode {
                node_id: n.node_id.clone(),
                node_type: n.node_type,
                intent: n.intent.clone(),
                document_id: n.source.document_id.clone(),
            })
            .collect();
        let edges = kb
            .nodes()
            .flat_map(|n| {
                n.linkers.iter().filter_map(move |l| {
                    let target = kb.node(l.resolved_target.as_deref()?)?;
                    Some(GraphEdge {
                        from: n.node_id.clone(),
                        to: target.node_id.clone(),
                        outcome_label: l.outcome_label.clone(),
                        score: l.resolution_score,
                        cross_tsg: target.source.document_id != n.source.document_id,
                    })
                })
            })
            .collect();
        Self { nodes, edges }
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&GraphEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph kb {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let shape = match n.node_type {
                NodeType::Decision => "diamond",
                NodeType::Check => "hexagon",
                NodeType::Terminal => "doublecircle",
                NodeType::Action => "box",
            };
            let _ = writeln!(
                out,
                "  \"{}\" [label=\"{}\\n{}\", shape={shape}];",
                escape(&n.node_id),
                escape(&n.node_id),
                escape(&n.intent)
            );
        }
        for e in &self.edges {
            let style = if e.cross_tsg {
                ", style=dashed, color=blue"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"{}\"{style}];",
                escape(&e.from),
                escape(&e.to),
                escape(&e.outcome_label)
            );
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

//! Structured troubleshooting guides: on-disk JSON format, parse-time
//! invariants, quality rules and LLM-driven normalization of raw text.

mod normalize;
mod quality;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use normalize::{normalize_raw_tsg, NormalizeError, NORMALIZE_RETRIES};
pub use quality::{validate_quality, QualityReport, RuleId, Severity, Violation};

const TERMINAL_MARKER: &str = "TERMINAL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredTsg {
    pub tsg_id: String,
    pub title: String,
    pub background: String,
    pub terminology: BTreeMap<String, String>,
    pub faq: Vec<FaqEntry>,
    pub flow: Vec<FlowStep>,
    pub appendix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaqEntry {
    pub q: String,
    pub a: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowStep {
    pub step_id: String,
    pub intent: String,
    pub action: String,
    pub outcomes: Outcomes,
    #[serde(default)]
    pub executable_hint: Option<String>,
}

impl FlowStep {
    pub fn is_terminal(&self) -> bool {
        self.outcomes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OutcomeTarget {
    /// Another step of the same TSG.
    Step(String),
    /// Free intent text, typically owned by another TSG.
    ExternalIntent(String),
    Terminal,
}

/// Outcome label → target, in document order, labels unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcomes(Vec<(String, OutcomeTarget)>);

impl Outcomes {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an outcome; returns `false` if the label already exists.
    pub fn insert(&mut self, label: impl Into<String>, target: OutcomeTarget) -> bool {
        let label = label.into();
        if self.get(&label).is_some() {
            return false;
        }
        self.0.push((label, target));
        true
    }

    pub fn get(&self, label: &str) -> Option<&OutcomeTarget> {
        self.0.iter().find(|(l, _)| l == label).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &OutcomeTarget)> {
        self.0.iter().map(|(l, t)| (l.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<L: Into<String>> FromIterator<(L, OutcomeTarget)> for Outcomes {
    fn from_iter<I: IntoIterator<Item = (L, OutcomeTarget)>>(iter: I) -> Self {
        let mut outcomes = Outcomes::new();
        for (label, target) in iter {
            outcomes.insert(label, target);
        }
        outcomes
    }
}

impl Serialize for OutcomeTarget {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            OutcomeTarget::Terminal => serializer.serialize_str(TERMINAL_MARKER),
            OutcomeTarget::Step(id) => {
                let mut map = serializer.serialize_map(Some(1))?;
                map.serialize_entry("step", id)?;
                map.end()
            }
            OutcomeTarget::ExternalIntent(text) => {
                let mut map = serializer.serialize_map(Some(1))?;
                map.serialize_entry("external_intent", text)?;
                map.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for OutcomeTarget {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TargetVisitor;

        impl<'de> Visitor<'de> for TargetVisitor {
            type Value = OutcomeTarget;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str(r#""TERMINAL", {"step": id} or {"external_intent": text}"#)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == TERMINAL_MARKER {
                    Ok(OutcomeTarget::Terminal)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let Some(key) = map.next_key::<String>()? else {
                    return Err(de::Error::invalid_length(0, &self));
                };
                let target = match key.as_str() {
                    "step" => OutcomeTarget::Step(map.next_value()?),
                    "external_intent" => OutcomeTarget::ExternalIntent(map.next_value()?),
                    other => {
                        return Err(de::Error::unknown_field(
                            other,
                            &["step", "external_intent"],
                        ))
                    }
                };
                if let Some(extra) = map.next_key::<String>()? {
                    return Err(de::Error::custom(format!(
                        "outcome target has more than one field (unexpected `{extra}`)"
                    )));
                }
                Ok(target)
            }
        }

        deserializer.deserialize_any(TargetVisitor)
    }
}

impl Serialize for Outcomes {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (label, target) in &self.0 {
            map.serialize_entry(label, target)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Outcomes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct OutcomesVisitor;

        impl<'de> Visitor<'de> for OutcomesVisitor {
            type Value = Outcomes;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of outcome label to target")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut outcomes = Outcomes::new();
                while let Some((label, target)) = map.next_entry::<String, OutcomeTarget>()? {
                    if !outcomes.insert(label.clone(), target) {
                        return Err(de::Error::custom(format!(
                            "duplicate outcome label `{label}`"
                        )));
                    }
                }
                Ok(outcomes)
            }
        }

        deserializer.deserialize_map(OutcomesVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at {location}: {message}")]
    Schema { location: String, message: String },
}

impl ParseError {
    fn schema(location: impl Into<String>, message: impl Into<String>) -> Self {
        ParseError::Schema {
            location: location.into(),
            message: message.into(),
        }
    }
}

/// Deserialize one structured TSG and enforce its invariants.
pub fn parse_structured_tsg(document: &str) -> Result<StructuredTsg, ParseError> {
    let mut de = serde_json::Deserializer::from_str(document);
    let parsed = serde_path_to_error::deserialize::<_, StructuredTsg>(&mut de).map_err(|err| {
        let path = err.path().to_string();
        json_error(document, &path, err.into_inner())
    })?;
    de.end().map_err(|e| json_error(document, ".", e))?;
    let tsg = parsed;
    check_invariants(&tsg)?;
    Ok(tsg)
}

fn json_error(document: &str, path: &str, inner: serde_json::Error) -> ParseError {
    match inner.classify() {
        serde_json::error::Category::Data => {
            ParseError::schema(readable_location(document, path), strip_position(&inner))
        }
        _ => ParseError::Syntax {
            line: inner.line(),
            column: inner.column(),
            message: strip_position(&inner),
        },
    }
}

impl StructuredTsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("TSG serialization is infallible")
    }

    pub fn step(&self, step_id: &str) -> Option<&FlowStep> {
        self.flow.iter().find(|s| s.step_id == step_id)
    }

    /// The canonical entry step: the first element of the flow.
    pub fn entry(&self) -> Option<&FlowStep> {
        self.flow.first()
    }
}

fn check_invariants(tsg: &StructuredTsg) -> Result<(), ParseError> {
    if tsg.tsg_id.trim().is_empty() {
        return Err(ParseError::schema("tsg_id", "tsg_id must be non-empty"));
    }
    if tsg.flow.is_empty() {
        return Err(ParseError::schema(
            "flow",
            "flow must contain at least one step",
        ));
    }
    let mut seen = HashSet::new();
    for (i, step) in tsg.flow.iter().enumerate() {
        if step.step_id.trim().is_empty() {
            return Err(ParseError::schema(
                format!("flow[{i}].step_id"),
                "step_id must be non-empty",
            ));
        }
        if !seen.insert(step.step_id.as_str()) {
            return Err(ParseError::schema(
                format!("flow[{}]", step.step_id),
                format!("duplicate step_id `{}`", step.step_id),
            ));
        }
        if step.intent.trim().is_empty() {
            return Err(ParseError::schema(
                format!("flow[{}].intent", step.step_id),
                "intent must be non-empty",
            ));
        }
        if step.action.trim().is_empty() {
            return Err(ParseError::schema(
                format!("flow[{}].action", step.step_id),
                "action must be non-empty",
            ));
        }
    }
    for step in &tsg.flow {
        for (label, target) in step.outcomes.iter() {
            match target {
                OutcomeTarget::Step(id) if !seen.contains(id.as_str()) => {
                    return Err(ParseError::schema(
                        format!("flow[{}].outcomes.{label}", step.step_id),
                        format!("references unknown step `{id}`"),
                    ));
                }
                OutcomeTarget::ExternalIntent(text) if text.trim().is_empty() => {
                    return Err(ParseError::schema(
                        format!("flow[{}].outcomes.{label}", step.step_id),
                        "external intent must be non-empty",
                    ));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Rewrites `flow[3]...` into `flow[<step_id>]...` when the document lets
/// us recover the step id, and maps the root path to `tsg`.
fn readable_location(document: &str, path: &str) -> String {
    if path == "." || path.is_empty() {
        return "tsg".to_string();
    }
    let Some(rest) = path.strip_prefix("flow[") else {
        return path.to_string();
    };
    let Some((index, tail)) = rest.split_once(']') else {
        return path.to_string();
    };
    let step_id = index.parse::<usize>().ok().and_then(|i| {
        let value: serde_json::Value = serde_json::from_str(document).ok()?;
        value["flow"][i]["step_id"].as_str().map(str::to_string)
    });
    match step_id {
        Some(id) => format!("flow[{id}]{tail}"),
        None => path.to_string(),
    }
}

fn strip_position(err: &serde_json::Error) -> String {
    let text = err.to_string();
    match text.rfind(" at line ") {
        Some(at) => text[..at].to_string(),
        None => text,
    }
}

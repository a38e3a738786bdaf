//! Quality rules for structured TSGs.
//!
//! | rule | checks                                                        | severity |
//! |------|---------------------------------------------------------------|----------|
//! | Q1   | required sections carry content (title, background, flow)     | error    |
//! | Q2   | every flow step is reachable from the first step              | error    |
//! | Q3   | every outcome target is an existing step, TERMINAL or a       | error    |
//! |      | non-empty external intent                                     |          |
//! | Q4   | action text is not a placeholder and has at least 10 chars    | warning  |
//! | Q5   | every terminology term is used in the flow or the background  | warning  |

use std::collections::{HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{OutcomeTarget, StructuredTsg};

const MIN_ACTION_CHARS: usize = 10;
const PLACEHOLDERS: &[&str] = &[
    "todo",
    "tbd",
    "fixme",
    "xxx",
    "n/a",
    "na",
    "...",
    "…",
    "placeholder",
    "?",
    "-",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleId {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    /// The document did not parse at all (normalization feedback only).
    #[serde(rename = "parse")]
    Parse,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleId::Q1 => "Q1",
            RuleId::Q2 => "Q2",
            RuleId::Q3 => "Q3",
            RuleId::Q4 => "Q4",
            RuleId::Q5 => "Q5",
            RuleId::Parse => "parse",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: RuleId,
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityReport {
    pub tsg_id: String,
    pub violations: Vec<Violation>,
    pub passed: bool,
}

impl QualityReport {
    pub fn new(tsg_id: impl Into<String>, violations: Vec<Violation>) -> Self {
        let passed = !violations.iter().any(|v| v.severity == Severity::Error);
        Self {
            tsg_id: tsg_id.into(),
            violations,
            passed,
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }
}

pub fn validate_quality(tsg: &StructuredTsg) -> QualityReport {
    let mut violations = Vec::new();
    check_sections(tsg, &mut violations);
    check_reachability(tsg, &mut violations);
    check_targets(tsg, &mut violations);
    check_actions(tsg, &mut violations);
    check_terminology(tsg, &mut violations);
    QualityReport::new(tsg.tsg_id.clone(), violations)
}

fn violation(rule_id: RuleId, severity: Severity, location: String, message: String) -> Violation {
    Violation {
        rule_id,
        severity,
        location,
        message,
    }
}

fn check_sections(tsg: &StructuredTsg, out: &mut Vec<Violation>) {
    let blank = [
        ("title", tsg.title.trim().is_empty()),
        ("background", tsg.background.trim().is_empty()),
        ("flow", tsg.flow.is_empty()),
    ];
    for (section, missing) in blank {
        if missing {
            out.push(violation(
                RuleId::Q1,
                Severity::Error,
                section.to_string(),
                format!("section `{section}` is empty"),
            ));
        }
    }
}

fn check_reachability(tsg: &StructuredTsg, out: &mut Vec<Violation>) {
    let Some(entry) = tsg.entry() else { return };
    let mut reached: HashSet<&str> = HashSet::from([entry.step_id.as_str()]);
    let mut queue = VecDeque::from([entry]);
    while let Some(step) = queue.pop_front() {
        for (_, target) in step.outcomes.iter() {
            if let OutcomeTarget::Step(id) = target {
                if let Some(next) = tsg.step(id) {
                    if reached.insert(next.step_id.as_str()) {
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    for step in &tsg.flow {
        if !reached.contains(step.step_id.as_str()) {
            out.push(violation(
                RuleId::Q2,
                Severity::Error,
                format!("flow[{}]", step.step_id),
                format!(
                    "step `{}` is unreachable from entry step `{}`",
                    step.step_id, entry.step_id
                ),
            ));
        }
    }
}

fn check_targets(tsg: &StructuredTsg, out: &mut Vec<Violation>) {
    for step in &tsg.flow {
        for (label, target) in step.outcomes.iter() {
            let problem = match target {
                OutcomeTarget::Step(id) if tsg.step(id).is_none() => {
                    Some(format!("unknown step `{id}`"))
                }
                OutcomeTarget::ExternalIntent(text) if text.trim().is_empty() => {
                    Some("empty external intent".to_string())
                }
                _ => None,
            };
            if let Some(message) = problem {
                out.push(violation(
                    RuleId::Q3,
                    Severity::Error,
                    format!("flow[{}].outcomes.{label}", step.step_id),
                    message,
                ));
            }
        }
    }
}

fn is_placeholder(action: &str) -> bool {
    let lower = action.trim().to_lowercase();
    PLACEHOLDERS.contains(&lower.as_str()) || lower.starts_with("todo") || lower.starts_with("tbd")
}

fn check_actions(tsg: &StructuredTsg, out: &mut Vec<Violation>) {
    for step in &tsg.flow {
        let action = step.action.trim();
        let message = if is_placeholder(action) {
            format!("action `{action}` is a placeholder")
        } else if action.chars().count() < MIN_ACTION_CHARS {
            format!("action `{action}` is shorter than {MIN_ACTION_CHARS} characters")
        } else {
            continue;
        };
        out.push(violation(
            RuleId::Q4,
            Severity::Warning,
            format!("flow[{}].action", step.step_id),
            message,
        ));
    }
}

fn check_terminology(tsg: &StructuredTsg, out: &mut Vec<Violation>) {
    let mut corpus = tsg.background.to_lowercase();
    for step in &tsg.flow {
        corpus.push('\n');
        corpus.push_str(&step.intent.to_lowercase());
        corpus.push('\n');
        corpus.push_str(&step.action.to_lowercase());
    }
    for term in tsg.terminology.keys() {
        if !corpus.contains(&term.to_lowercase()) {
            out.push(violation(
                RuleId::Q5,
                Severity::Warning,
                format!("terminology.{term}"),
                format!("term `{term}` is never used in the flow or background"),
            ));
        }
    }
}

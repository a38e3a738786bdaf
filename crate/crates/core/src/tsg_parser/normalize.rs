use thiserror::Error;

use super::{
    parse_structured_tsg, validate_quality, ParseError, QualityReport, RuleId, Severity,
    StructuredTsg, Violation,
};
use crate::llm_provider::{
    self, strip_code_fence, ChatRequest, LlmProvider, ProviderError, SchemaId,
};
use crate::prompts;

/// Re-prompts after the first attempt; at most `1 + NORMALIZE_RETRIES`
/// provider calls are made.
pub const NORMALIZE_RETRIES: usize = 3;

const AGENT: &str = "tsg_normalizer";

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("raw TSG text is empty")]
    EmptyInput,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("normalization failed after {attempts} attempts")]
    NormalizationFailed {
        attempts: usize,
        last_report: QualityReport,
    },
}

/// Ask `provider` to restructure `raw`, accepting the first output that
/// parses and has no error-severity quality violations. Each rejected
/// attempt's report is fed back into the next prompt.
pub async fn normalize_raw_tsg(
    raw: &str,
    provider: &dyn LlmProvider,
) -> Result<StructuredTsg, NormalizeError> {
    if raw.trim().is_empty() {
        return Err(NormalizeError::EmptyInput);
    }
    let base = ChatRequest::new(AGENT, SchemaId::StructuredTsg)
        .system(prompts::render(
            prompts::NORMALIZE_TSG,
            &[("schema", SchemaId::StructuredTsg.json_schema())],
        ))
        .user(raw);
    let mut request = base.clone();
    let mut last_report = None;
    for attempt in 1..=NORMALIZE_RETRIES + 1 {
        let output = llm_provider::complete(provider, &request).await?;
        let report = match parse_structured_tsg(strip_code_fence(&output)) {
            Ok(tsg) => {
                let report = validate_quality(&tsg);
                if report.passed {
                    return Ok(tsg);
                }
                report
            }
            Err(err) => parse_failure_report(&err),
        };
        tracing::debug!(
            attempt,
            violations = report.violations.len(),
            "normalized TSG rejected"
        );
        let feedback = serde_json::to_string(&report).expect("report serializes");
        request = base.with_feedback(&feedback);
        last_report = Some(report);
    }
    Err(NormalizeError::NormalizationFailed {
        attempts: NORMALIZE_RETRIES + 1,
        last_report: last_report.expect("at least one attempt"),
    })
}

fn parse_failure_report(err: &ParseError) -> QualityReport {
    let location = match err {
        ParseError::Syntax { line, column, .. } => format!("line {line}, column {column}"),
        ParseError::Schema { location, .. } => location.clone(),
    };
    QualityReport::new(
        "",
        vec![Violation {
            rule_id: RuleId::Parse,
            severity: Severity::Error,
            location,
            message: err.to_string(),
        }],
    )
}

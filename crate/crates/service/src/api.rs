//! JSON-over-HTTP interface.
//!
//! | route | maps to |
//! |---|---|
//! | `POST /tsgs[?replace=true]` | ingest one structured TSG |
//! | `POST /sessions` | start a session |
//! | `GET /sessions` | list session ids |
//! | `GET /sessions/{id}[?wait_seq=N&timeout_ms=T]` | session view, optionally long-polling |
//! | `POST /sessions/{id}/messages` | `{"text": ...}` from the OCE |
//! | `POST /sessions/{id}/results` | `{"text": ...}` result of a manual step |
//! | `POST /sessions/{id}/advance[?auto=true]` | one transition, or run until a human is needed |
//! | `GET /kb/nodes?query=...&k=...` | top-k retrieval |
//! | `GET /kb/nodes/{id}` | one node and its graph neighborhood |
//! | `GET /kb/graph` | nodes and edges; DOT with `Accept: text/vnd.graphviz` |

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mitigraph_core::ingest::{ingest_tsg, IngestError};
use mitigraph_core::kb_store::StoreError;
use mitigraph_core::orchestrator::OrchestratorError;
use mitigraph_core::parse_structured_tsg;
use mitigraph_core::tsg_parser::ParseError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::runtime::Runtime;
use crate::view::{ApiSessionView, SCHEMA_VERSION};

/// Upper bound on one long-poll.
pub const MAX_WAIT: Duration = Duration::from_secs(60);
const DEFAULT_WAIT: Duration = Duration::from_secs(25);

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).ok();
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(detail) = self.detail {
            error["detail"] = detail;
        }
        if self.status.is_server_error() {
            let id = uuid::Uuid::new_v4().to_string();
            tracing::error!(diagnostic_id = %id, code = self.code, message = %self.message, "request failed");
            error["diagnostic_id"] = json!(id);
        }
        (
            self.status,
            Json(json!({"schema_version": SCHEMA_VERSION, "error": error})),
        )
            .into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(err: OrchestratorError) -> Self {
        let (status, code) = match &err {
            OrchestratorError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            OrchestratorError::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
            OrchestratorError::Busy(_) => (StatusCode::TOO_MANY_REQUESTS, "busy"),
            OrchestratorError::InvalidInput(_) => (StatusCode::BAD_REQUEST, "invalid_input"),
            OrchestratorError::CorruptLog { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_log")
            }
            OrchestratorError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "log_error"),
            OrchestratorError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, err.to_string())
    }
}

fn parse_error(err: ParseError) -> ApiError {
    let detail = match &err {
        ParseError::Syntax { line, column, .. } => json!({"line": line, "column": column}),
        ParseError::Schema { location, .. } => json!({"location": location}),
    };
    ApiError::new(StatusCode::BAD_REQUEST, "invalid_tsg", err.to_string()).with_detail(detail)
}

fn store_error(err: StoreError) -> ApiError {
    match err {
        StoreError::Provider(e) => ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "provider_unavailable",
            e.to_string(),
        ),
        StoreError::EmptyIndex => ApiError::new(
            StatusCode::NOT_FOUND,
            "empty_kb",
            "the knowledge base is empty",
        ),
        StoreError::UnknownNode(id) => ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown node {id}"),
        ),
        StoreError::InvalidK => ApiError::bad_request("k must be at least 1"),
        other => ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "store_error",
            other.to_string(),
        ),
    }
}

impl From<IngestError> for ApiError {
    fn from(err: IngestError) -> Self {
        match err {
            IngestError::Parse(e) => parse_error(e),
            IngestError::Quality(report) => ApiError::new(
                StatusCode::BAD_REQUEST,
                "quality_failed",
                format!("TSG {} fails quality checks", report.tsg_id),
            )
            .with_detail(report),
            IngestError::Duplicate(id) => ApiError::new(
                StatusCode::CONFLICT,
                "duplicate_tsg",
                format!("TSG {id} is already ingested; use ?replace=true"),
            ),
            IngestError::Compile(e) => {
                ApiError::new(StatusCode::BAD_REQUEST, "compile_failed", e.to_string())
            }
            IngestError::Store(e) => store_error(e),
        }
    }
}

fn json_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
pub struct AppState {
    runtime: Arc<Runtime>,
}

pub fn router(runtime: Arc<Runtime>) -> Router {
    Router::new()
        .route("/tsgs", post(post_tsg))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/results", post(post_result))
        .route("/sessions/{id}/advance", post(advance))
        .route("/kb/nodes", get(query_nodes))
        .route("/kb/nodes/{*id}", get(get_node))
        .route("/kb/graph", get(get_graph))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint") })
        .with_state(AppState { runtime })
}

fn view_of(state: &AppState, session_id: &str) -> ApiResult<Json<ApiSessionView>> {
    let events = state.runtime.orchestrator.events(session_id)?;
    let view =
        ApiSessionView::from_events(&events).map_err(|source| OrchestratorError::CorruptLog {
            session_id: session_id.to_string(),
            source,
        })?;
    Ok(Json(view))
}

#[derive(Deserialize)]
struct ReplaceParam {
    #[serde(default)]
    replace: bool,
}

async fn post_tsg(
    State(state): State<AppState>,
    Query(q): Query<ReplaceParam>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let text =
        std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let tsg = parse_structured_tsg(text).map_err(parse_error)?;
    let report = ingest_tsg(
        &state.runtime.kb,
        &tsg,
        &state.runtime.ingest_options(q.replace),
    )
    .await?;
    let mut body = serde_json::to_value(report).expect("report serializes");
    body["schema_version"] = json!(SCHEMA_VERSION);
    Ok(Json(body))
}

async fn create_session(
    State(state): State<AppState>,
) -> ApiResult<(StatusCode, Json<ApiSessionView>)> {
    let session = state.runtime.orchestrator.start_session().await?;
    Ok((StatusCode::CREATED, view_of(&state, &session.session_id)?))
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Value>> {
    let ids = state
        .runtime
        .orchestrator
        .log()
        .session_ids()
        .map_err(OrchestratorError::from)?;
    Ok(Json(
        json!({"schema_version": SCHEMA_VERSION, "sessions": ids}),
    ))
}

#[derive(Deserialize)]
struct WaitParams {
    wait_seq: Option<u64>,
    timeout_ms: Option<u64>,
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitParams>,
) -> ApiResult<Json<ApiSessionView>> {
    if let Some(seq) = q.wait_seq {
        let timeout = q
            .timeout_ms
            .map_or(DEFAULT_WAIT, Duration::from_millis)
            .min(MAX_WAIT);
        state
            .runtime
            .orchestrator
            .wait_for_seq(&id, seq, timeout)
            .await?;
    }
    view_of(&state, &id)
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<ApiSessionView>> {
    let TextBody { text } = json_body(&body)?;
    state
        .runtime
        .orchestrator
        .submit_message(&id, &text)
        .await?;
    view_of(&state, &id)
}

async fn post_result(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<ApiSessionView>> {
    let TextBody { text } = json_body(&body)?;
    state
        .runtime
        .orchestrator
        .submit_manual_result(&id, &text)
        .await?;
    view_of(&state, &id)
}

#[derive(Deserialize)]
struct AdvanceParams {
    #[serde(default)]
    auto: bool,
}

async fn advance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AdvanceParams>,
) -> ApiResult<Json<ApiSessionView>> {
    let orchestrator = &state.runtime.orchestrator;
    if q.auto {
        orchestrator.run(&id).await?;
    } else {
        orchestrator.advance(&id).await?;
    }
    view_of(&state, &id)
}

#[derive(Deserialize)]
struct NodeQuery {
    query: Option<String>,
    k: Option<i64>,
}

async fn query_nodes(
    State(state): State<AppState>,
    Query(q): Query<NodeQuery>,
) -> ApiResult<Json<Value>> {
    let k = q.k.unwrap_or(state.runtime.config.thresholds.top_k as i64);
    if k < 1 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let query = q
        .query
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request("query is required"))?;
    let nodes = state
        .runtime
        .kb
        .retrieve_top_k(&query, k as usize)
        .await
        .map_err(store_error)?;
    Ok(Json(
        json!({"schema_version": SCHEMA_VERSION, "query": query, "nodes": nodes}),
    ))
}

async fn get_node(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let kb = state.runtime.kb.snapshot();
    let node = kb
        .node(&id)
        .ok_or_else(|| store_error(StoreError::UnknownNode(id.clone())))?;
    let graph = kb.graph();
    let incoming: Vec<_> = graph.edges.iter().filter(|e| e.to == id).collect();
    let outgoing: Vec<_> = graph.edges.iter().filter(|e| e.from == id).collect();
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "node": node,
        "incoming": incoming,
        "outgoing": outgoing,
    })))
}

async fn get_graph(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let graph = state.runtime.kb.snapshot().graph();
    let wants_dot = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("text/vnd.graphviz"));
    if wants_dot {
        return (
            [(header::CONTENT_TYPE, "text/vnd.graphviz")],
            graph.to_dot(),
        )
            .into_response();
    }
    let mut body = serde_json::to_value(graph).expect("graph serializes");
    body["schema_version"] = json!(SCHEMA_VERSION);
    Json(body).into_response()
}

//! HTTP front door for the ClearGate engine.
//!
//! Thin by design: every policy decision, every audit line, and every piece
//! of inference behavior lives in `cleargate-core`. This crate maps HTTP
//! onto the engine and nothing else — bearer-token authentication against
//! the policy's token table, JSON bodies in and out, and a fixed error
//! vocabulary:
//!
//! | status | meaning |
//! |--------|---------|
//! | 400    | malformed body, empty prompt/text, invalid k, dangling role, invalid policy on reload |
//! | 401    | missing or unknown bearer token |
//! | 403    | unknown subject, non-admin on an admin route, `user_id` mismatch, no authorized experts |
//! | 404    | document missing *or denied* (indistinguishable), admin delete of an absent id |
//! | 409    | duplicate document id on ingest |
//! | 500    | audit/storage failure |
//!
//! Authentication happens before anything touches the document store, so an
//! unauthenticated caller cannot cause (or time) any retrieval work. 401s
//! are not audited: the trail records decisions about *subjects*, and an
//! unresolvable token never becomes one.
//!
//! Routes:
//!
//! ```text
//! POST   /v1/query              inference (rag | moe | hybrid)
//! POST   /v1/documents          ingest one document            (admin)
//! DELETE /v1/documents/{id}     remove a document              (admin)
//! GET    /v1/documents/{id}     fetch a document (policy-checked)
//! POST   /v1/policy/reload      re-read and install the policy (admin)
//! GET    /v1/audit?limit=N      last N audit entries           (admin)
//! GET    /v1/healthz            liveness + policy version (no auth)
//! ```

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use cleargate_core::engine::{Engine, EngineConfig, EngineError};
use cleargate_core::moe::{ExpertId, MoeError};
use cleargate_core::orchestrator::{EchoGenerator, InferenceMode, InferenceRequest};
use cleargate_core::policy::{PolicyError, PolicyFile};
use cleargate_core::store::{read_corpus_jsonl, StoreError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind 127.0.0.1:{port}: {source}")]
    Bind {
        port: u16,
        source: std::io::Error,
    },
    #[error("configuration invalid: {0}")]
    Config(#[from] EngineError),
    #[error("server i/o: {0}")]
    Io(std::io::Error),
}

/// Everything `serve` needs to stand up a gateway.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Port on 127.0.0.1; 0 picks a free one.
    pub port: u16,
    pub policy_path: PathBuf,
    pub corpus_path: Option<PathBuf>,
    pub audit_path: PathBuf,
    pub temperature: f64,
}

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    /// Where the policy was loaded from; `POST /v1/policy/reload` re-reads
    /// this path.
    pub policy_path: PathBuf,
}

/// An authenticated caller.
#[derive(Debug, Clone)]
pub struct Principal {
    pub user_id: String,
    pub is_admin: bool,
}

/// Loads policy and corpus from disk and boots an engine (policy version 1,
/// corpus ingested, expert grid trained).
pub fn build_engine(config: &ServeConfig) -> Result<Engine, GatewayError> {
    let policy = PolicyFile::from_path(&config.policy_path).map_err(EngineError::from)?;
    let corpus = match &config.corpus_path {
        Some(path) => read_corpus_jsonl(path).map_err(EngineError::from)?,
        None => Vec::new(),
    };
    let engine = Engine::bootstrap(
        &policy,
        &corpus,
        &config.audit_path,
        Box::new(EchoGenerator),
        EngineConfig {
            temperature: config.temperature,
        },
    )?;
    Ok(engine)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/documents", post(ingest))
        .route("/v1/documents/{id}", get(fetch).delete(remove))
        .route("/v1/policy/reload", post(reload))
        .route("/v1/audit", get(audit_tail))
        .route("/v1/healthz", get(healthz))
        .with_state(state)
}

/// Binds, announces the address on stdout, and serves until ctrl-c.
pub async fn serve(config: ServeConfig) -> Result<(), GatewayError> {
    let engine = build_engine(&config)?;
    let state = AppState {
        engine: Arc::new(engine),
        policy_path: config.policy_path.clone(),
    };
    let app = router(state);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", config.port))
        .await
        .map_err(|source| GatewayError::Bind {
            port: config.port,
            source,
        })?;
    let addr = listener.local_addr().map_err(GatewayError::Io)?;
    println!("cleargate listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(GatewayError::Io)
}

// ---------------------------------------------------------------------------
// authentication

/// Resolves the bearer token against the current policy's token table.
/// Runs before any store access; failures are 401 and unaudited.
#[allow(clippy::result_large_err)] // the Err is a finished HTTP response, built once on a cold path
fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<Principal, Response> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    let Some(token) = token else {
        return Err(error_body(StatusCode::UNAUTHORIZED, "unauthorized", None));
    };
    let policy = state.engine.current_policy();
    let Some(user_id) = policy.resolve_token(token) else {
        return Err(error_body(StatusCode::UNAUTHORIZED, "unauthorized", None));
    };
    Ok(Principal {
        user_id: user_id.to_owned(),
        is_admin: policy.is_admin(user_id),
    })
}

#[allow(clippy::result_large_err)] // same shape as `authenticate`
fn require_admin(principal: &Principal) -> Result<(), Response> {
    if principal.is_admin {
        Ok(())
    } else {
        Err(error_body(
            StatusCode::FORBIDDEN,
            "forbidden",
            Some("administrative endpoint"),
        ))
    }
}

// ---------------------------------------------------------------------------
// error mapping

fn error_body(status: StatusCode, code: &str, detail: Option<&str>) -> Response {
    let body = match detail {
        Some(detail) => json!({ "error": code, "detail": detail }),
        None => json!({ "error": code }),
    };
    (status, Json(body)).into_response()
}

fn bad_request(code: &str, detail: String) -> Response {
    error_body(StatusCode::BAD_REQUEST, code, Some(&detail))
}

/// The single place engine errors become HTTP.
fn engine_error(e: &EngineError) -> Response {
    use StatusCode as S;
    match e {
        EngineError::UnknownSubject(_) => error_body(S::FORBIDDEN, "unknown_subject", None),
        EngineError::EmptyPrompt | EngineError::Moe(MoeError::EmptyPrompt) => {
            error_body(S::BAD_REQUEST, "empty_prompt", None)
        }
        EngineError::InvalidRequest(msg) => bad_request("invalid_request", msg.clone()),
        EngineError::Policy(PolicyError::Invalid(report)) => {
            bad_request("policy_invalid", report.to_string())
        }
        EngineError::Policy(e) => bad_request("policy_unreadable", e.to_string()),
        EngineError::Store(e) => match e {
            StoreError::DuplicateId(_) => error_body(S::CONFLICT, "duplicate_id", None),
            StoreError::DanglingRoleRef(role) => bad_request("dangling_role_ref", role.clone()),
            StoreError::EmptyText => error_body(S::BAD_REQUEST, "empty_text", None),
            StoreError::UnknownSubject(_) => error_body(S::FORBIDDEN, "unknown_subject", None),
            // Missing and denied produce these same bytes; see the
            // non-disclosure tests.
            StoreError::NotFoundOrDenied => {
                error_body(S::NOT_FOUND, "not_found_or_denied", None)
            }
            StoreError::NotFound(_) => error_body(S::NOT_FOUND, "not_found", None),
            StoreError::Io(_) | StoreError::CorpusParse { .. } => {
                error_body(S::INTERNAL_SERVER_ERROR, "storage_failure", None)
            }
        },
        EngineError::Moe(e) => match e {
            MoeError::NoAuthorizedExperts => {
                error_body(S::FORBIDDEN, "no_authorized_experts", None)
            }
            MoeError::EmptyRoleSet | MoeError::DanglingRoleRef(_) => {
                bad_request("policy_invalid", e.to_string())
            }
            MoeError::EmptyPrompt => error_body(S::BAD_REQUEST, "empty_prompt", None),
            MoeError::UntrainedExpert(_) => {
                error_body(S::INTERNAL_SERVER_ERROR, "internal", None)
            }
        },
        EngineError::Audit(_) => error_body(S::INTERNAL_SERVER_ERROR, "storage_failure", None),
    }
}

// ---------------------------------------------------------------------------
// handlers

#[derive(Debug, Deserialize)]
struct QueryBody {
    prompt: String,
    mode: InferenceMode,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    top_k_experts: Option<usize>,
    /// Optional; if present it must name the authenticated subject.
    #[serde(default)]
    user_id: Option<String>,
}

async fn query(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<QueryBody>, JsonRejection>,
) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    let Json(body) = match body {
        Ok(b) => b,
        Err(rejection) => return bad_request("malformed_body", rejection.body_text()),
    };
    if let Some(user_id) = &body.user_id {
        if *user_id != principal.user_id {
            return error_body(
                StatusCode::FORBIDDEN,
                "forbidden",
                Some("user_id does not match the authenticated subject"),
            );
        }
    }
    let mut request = InferenceRequest::new(principal.user_id, body.prompt, body.mode);
    if let Some(k) = body.k {
        request.k = k;
    }
    if let Some(top_k) = body.top_k_experts {
        request.top_k_experts = top_k;
    }
    match state.engine.infer(&request) {
        Ok(response) => (StatusCode::OK, Json(response)).into_response(),
        Err(e) => engine_error(&e),
    }
}

async fn ingest(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<cleargate_core::CorpusRecord>, JsonRejection>,
) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    if let Err(r) = require_admin(&principal) {
        return r;
    }
    let Json(record) = match body {
        Ok(b) => b,
        Err(rejection) => return bad_request("malformed_body", rejection.body_text()),
    };
    match state.engine.ingest_document(&principal.user_id, &record) {
        Ok(outcome) => {
            let retrained: Vec<String> =
                outcome.retrained.iter().map(ExpertId::canonical_name).collect();
            (
                StatusCode::OK,
                Json(json!({ "id": outcome.doc_id, "retrained_experts": retrained })),
            )
                .into_response()
        }
        Err(e) => engine_error(&e),
    }
}

async fn fetch(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(doc_id): Path<String>,
) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    match state.engine.fetch_document(&principal.user_id, &doc_id) {
        Ok(record) => (StatusCode::OK, Json(record)).into_response(),
        Err(e) => engine_error(&e),
    }
}

async fn remove(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(doc_id): Path<String>,
) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    if let Err(r) = require_admin(&principal) {
        return r;
    }
    match state.engine.remove_document(&principal.user_id, &doc_id) {
        Ok(retrained) => {
            let retrained: Vec<String> =
                retrained.iter().map(ExpertId::canonical_name).collect();
            (
                StatusCode::OK,
                Json(json!({ "removed": doc_id, "retrained_experts": retrained })),
            )
                .into_response()
        }
        Err(e) => engine_error(&e),
    }
}

async fn reload(State(state): State<AppState>, headers: HeaderMap) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    if let Err(r) = require_admin(&principal) {
        return r;
    }
    let file = match PolicyFile::from_path(&state.policy_path) {
        Ok(f) => f,
        Err(e) => return engine_error(&EngineError::Policy(e)),
    };
    match state.engine.reload_policy(&principal.user_id, &file) {
        Ok(version) => {
            (StatusCode::OK, Json(json!({ "policy_version": version }))).into_response()
        }
        Err(e) => engine_error(&e),
    }
}

#[derive(Debug, Deserialize)]
struct AuditParams {
    #[serde(default = "default_audit_limit")]
    limit: usize,
}

fn default_audit_limit() -> usize {
    50
}

async fn audit_tail(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(params): Query<AuditParams>,
) -> Response {
    let principal = match authenticate(&state, &headers) {
        Ok(p) => p,
        Err(r) => return r,
    };
    if let Err(r) = require_admin(&principal) {
        return r;
    }
    match state.engine.audit_tail(params.limit) {
        Ok(entries) => (StatusCode::OK, Json(json!({ "entries": entries }))).into_response(),
        Err(e) => engine_error(&e),
    }
}

async fn healthz(State(state): State<AppState>) -> Response {
    let body = json!({
        "status": "ok",
        "policy_version": state.engine.policy_version(),
        "documents": state.engine.document_count(),
        "experts": state.engine.current_experts().len(),
    });
    (StatusCode::OK, Json(body)).into_response()
}

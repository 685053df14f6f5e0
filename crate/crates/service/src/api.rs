//! JSON-over-HTTP front end for [`Engine`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medrag_core::engine::{ErrorKind, QueryRequest, SummarizeRequest};
use medrag_core::ingest::LineFailure;
use medrag_core::{Engine, EngineError};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

/// Corpus uploads can be far larger than axum's 2 MB default.
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub bearer_token: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: ErrorDetail,
}

#[derive(Debug, Serialize)]
struct ErrorDetail {
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    lines: Vec<LineFailure>,
}

/// Error response with a typed JSON body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    lines: Vec<LineFailure>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
            lines: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, kind) = match e.kind() {
            ErrorKind::BadRequest => (StatusCode::BAD_REQUEST, "bad_request"),
            ErrorKind::NotFound => (StatusCode::NOT_FOUND, "not_found"),
            ErrorKind::Upstream => (StatusCode::BAD_GATEWAY, "upstream"),
            ErrorKind::Internal => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        let message = e.to_string();
        let lines = match e {
            EngineError::MalformedPayload(lines) => lines,
            _ => Vec::new(),
        };
        ApiError {
            status,
            kind,
            message,
            lines,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                kind: self.kind,
                message: self.message,
                lines: self.lines,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

/// Parses a JSON body ourselves so malformed input gets the typed 400 body
/// instead of axum's plain-text rejection.
fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: QueryRequest = parse_json(&body)?;
    let out = state.engine.query(&req).await?;
    Ok(Json(out.response).into_response())
}

async fn summarize(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SummarizeRequest = parse_json(&body)?;
    let out = state.engine.summarize(&req).await?;
    Ok(Json(out.response).into_response())
}

/// Body is corpus JSONL. Any bad line rejects the whole payload.
async fn ingest(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let report = state.engine.ingest_jsonl(&body[..], true).await?;
    Ok(Json(report).into_response())
}

async fn health(State(state): State<AppState>) -> Response {
    Json(state.engine.health().await).into_response()
}

async fn chunk(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    match state.engine.get_chunk(&id) {
        Some(c) => Ok(Json(c).into_response()),
        None => Err(ApiError::from(EngineError::NotFound(format!("chunk {id}")))),
    }
}

async fn require_bearer(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(token) = state.bearer_token.as_deref() else {
        return next.run(req).await;
    };
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token) {
        next.run(req).await
    } else {
        ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or invalid bearer token",
        )
        .into_response()
    }
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    if origins.iter().any(|o| o == "*") {
        return base.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                None
            }
        })
        .collect();
    base.allow_origin(AllowOrigin::list(list))
}

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/summarize", post(summarize))
        .route("/v1/ingest", post(ingest))
        .route("/v1/health", get(health))
        .route("/v1/chunks/{id}", get(chunk))
        .layer(middleware::from_fn_with_state(state.clone(), require_bearer))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors_layer(cors_origins))
        .with_state(state)
}

//! HTTP JSON scoring service.
//!
//! | Route | Body | Reply |
//! |---|---|---|
//! | `POST /v1/score` | score request object | score response object |
//! | `POST /v1/score_batch` | array of score requests | array of score responses, same order |
//! | `POST /v1/classify` | `{"conversation": ".."}` | `{"label": "OPEN-ENDED" \| "CLOSED-ENDED"}` |
//! | `GET /healthz` | | `{"status":"ok","embedder_dim":N}` |
//!
//! Errors are `{"error":{"code":..,"message":..}}` with a 4xx status for bad
//! requests and 502 when an upstream embedder or classifier fails.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::engine::{check_fields, Engine, ScoreRequest, ScoreResponse};
use crate::error::AppError;

#[derive(Clone)]
struct AppState {
    engine: Arc<Engine>,
    permits: Arc<Semaphore>,
}

struct ApiError(AppError);

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        ApiError(e)
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "TEXT_TOO_LARGE" | "BATCH_TOO_LARGE" => StatusCode::PAYLOAD_TOO_LARGE,
        "REFERENCE_REQUIRED" | "CALIBRATION_REQUIRED" => StatusCode::UNPROCESSABLE_ENTITY,
        "EMBED_TRANSPORT" | "CLASSIFIER_TRANSPORT" | "DIMENSION_MISMATCH" => {
            StatusCode::BAD_GATEWAY
        }
        "NOT_FOUND" => StatusCode::NOT_FOUND,
        "INTERNAL" | "NON_FINITE" | "IO" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_for(self.0.code());
        if status.is_server_error() {
            tracing::warn!(code = self.0.code(), error = %self.0, "request failed");
        }
        (status, Json(self.0.body())).into_response()
    }
}

fn parse_json(body: &[u8]) -> Result<Value, AppError> {
    serde_json::from_slice(body).map_err(|e| AppError::request("BAD_JSON", e.to_string()))
}

/// Runs blocking engine work off the async workers, at most `max_in_flight` at once.
async fn run_blocking<T, F>(state: &AppState, f: F) -> Result<T, AppError>
where
    F: FnOnce(&Engine) -> Result<T, AppError> + Send + 'static,
    T: Send + 'static,
{
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|e| AppError::request("INTERNAL", e.to_string()))?;
    let engine = Arc::clone(&state.engine);
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| AppError::request("INTERNAL", e.to_string()))?
}

async fn score(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<ScoreResponse>, ApiError> {
    let req = ScoreRequest::from_value(parse_json(&body)?, state.engine.strict())?;
    Ok(Json(run_blocking(&state, move |e| e.score(&req)).await?))
}

async fn score_batch(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<Vec<ScoreResponse>>, ApiError> {
    let Value::Array(items) = parse_json(&body)? else {
        return Err(AppError::request("INVALID_REQUEST", "expected a JSON array").into());
    };
    state.engine.check_batch(items.len())?;
    let strict = state.engine.strict();
    let reqs = items
        .into_iter()
        .enumerate()
        .map(|(i, v)| ScoreRequest::from_value(v, strict).map_err(|e| at_index(i, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = run_blocking(&state, move |e| {
        reqs.iter()
            .enumerate()
            .map(|(i, r)| e.score(r).map_err(|err| at_index(i, err)))
            .collect()
    })
    .await?;
    Ok(Json(out))
}

fn at_index(i: usize, e: AppError) -> AppError {
    AppError::request(e.code(), format!("request {i}: {e}"))
}

#[derive(Deserialize)]
struct ClassifyRequest {
    conversation: String,
}

#[derive(Serialize)]
struct ClassifyResponse {
    label: r3_core::QueryType,
}

async fn classify(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<ClassifyResponse>, ApiError> {
    let value = parse_json(&body)?;
    check_fields(&value, &["conversation"], state.engine.strict())?;
    let req: ClassifyRequest = serde_json::from_value(value)
        .map_err(|e| AppError::request("INVALID_REQUEST", e.to_string()))?;
    let label = run_blocking(&state, move |e| e.classify(&req.conversation)).await?;
    Ok(Json(ClassifyResponse { label }))
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "embedder_dim": state.engine.embedder_dim() }))
}

async fn not_found() -> ApiError {
    AppError::request("NOT_FOUND", "no such route").into()
}

pub fn router(engine: Arc<Engine>) -> Router {
    // Room for a full batch of maximum-size texts plus JSON overhead.
    let body_limit = engine.max_batch() * (3 * engine.max_text_bytes() + 1024) + 4096;
    let state = AppState {
        permits: Arc::new(Semaphore::new(engine.max_in_flight())),
        engine,
    };
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/score_batch", post(score_batch))
        .route("/v1/classify", post(classify))
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(engine: Arc<Engine>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).await
}

//! HTTP routes. Every handler is stateless: responses depend on the request
//! payload and the immutable model only.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use bisync_core::corpus::LanguagePair;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use crate::engine::{
    validate_sync, Engine, ModelInfo, ParaphraseRequest, ParaphraseResponse, PrefixRequest, PrefixResponse,
    SyncRequest, SyncResponse, DEFAULT_ALTERNATIVES,
};
use crate::error::ApiError;

#[derive(Clone)]
pub struct AppState {
    pub engine: Option<Arc<Engine>>,
    pub languages: LanguagePair,
    /// Allowed browser origin; any origin when absent.
    pub cors_origin: Option<String>,
}

impl AppState {
    pub fn with_engine(engine: Engine) -> Self {
        Self { languages: engine.languages.clone(), engine: Some(Arc::new(engine)), cors_origin: None }
    }

    pub fn without_model(languages: LanguagePair) -> Self {
        Self { engine: None, languages, cors_origin: None }
    }

    fn engine(&self) -> Result<Arc<Engine>, ApiError> {
        self.engine.clone().ok_or(ApiError::NotLoaded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResponse {
    pub languages: [String; 2],
    pub n_alternatives_default: usize,
    pub model_info: Option<ModelInfo>,
    pub version: String,
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match state.cors_origin.as_deref().and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => cors.allow_origin(origin),
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/api/sync", post(sync))
        .route("/api/prefix_alternatives", post(prefix_alternatives))
        .route("/api/paraphrase", post(paraphrase))
        .route("/api/config", get(config))
        .layer(cors)
        .with_state(state)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

/// Decoding is CPU-bound; it runs on the blocking pool so that requests
/// never stall each other's I/O.
async fn run<T: Send + 'static>(
    engine: Arc<Engine>,
    f: impl FnOnce(&Engine) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::Internal(format!("decode task failed: {e}")))?
}

async fn sync(
    State(state): State<AppState>,
    payload: Result<Json<SyncRequest>, JsonRejection>,
) -> Result<Json<SyncResponse>, ApiError> {
    let start = Instant::now();
    let req = body(payload)?;
    validate_sync(&state.languages, &req)?;
    let engine = state.engine()?;
    let mut resp = run(engine, move |e| e.sync(&req)).await?;
    resp.latency_ms = start.elapsed().as_millis() as u64;
    tracing::debug!(task = ?resp.task_used, latency_ms = resp.latency_ms, "sync");
    Ok(Json(resp))
}

async fn prefix_alternatives(
    State(state): State<AppState>,
    payload: Result<Json<PrefixRequest>, JsonRejection>,
) -> Result<Json<PrefixResponse>, ApiError> {
    let req = body(payload)?;
    let engine = state.engine()?;
    Ok(Json(run(engine, move |e| e.prefix_alternatives(&req)).await?))
}

async fn paraphrase(
    State(state): State<AppState>,
    payload: Result<Json<ParaphraseRequest>, JsonRejection>,
) -> Result<Json<ParaphraseResponse>, ApiError> {
    let req = body(payload)?;
    let engine = state.engine()?;
    Ok(Json(run(engine, move |e| e.paraphrase(&req)).await?))
}

async fn config(State(state): State<AppState>) -> (StatusCode, Json<ConfigResponse>) {
    let [a, b] = state.languages.codes();
    (
        StatusCode::OK,
        Json(ConfigResponse {
            languages: [a.to_string(), b.to_string()],
            n_alternatives_default: DEFAULT_ALTERNATIVES,
            model_info: state.engine.as_ref().map(|e| e.info()),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }),
    )
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::error::ServeError;
use crate::request::RankRequest;
use crate::service::Ranker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRequest {
    pub checkpoint_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapResponse {
    pub model_version: String,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(ErrorBody { error: self.code().to_owned(), message: self.to_string() })).into_response()
    }
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ServeError> {
    serde_json::from_slice(body).map_err(|e| ServeError::InvalidRequest(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServeError> + Send + 'static) -> Result<T, ServeError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServeError::Internal(e.to_string()))?
}

async fn rank(State(ranker): State<Arc<Ranker>>, body: Bytes) -> Response {
    let req: RankRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match blocking(move || ranker.rank(&req)).await {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

async fn stats(State(ranker): State<Arc<Ranker>>) -> Response {
    Json(ranker.stats()).into_response()
}

async fn swap(State(ranker): State<Arc<Ranker>>, body: Bytes) -> Response {
    let req: SwapRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match blocking(move || ranker.swap_model(&req.checkpoint_path)).await {
        Ok(model_version) => Json(SwapResponse { model_version }).into_response(),
        Err(e) => e.into_response(),
    }
}

pub fn router(ranker: Arc<Ranker>) -> Router {
    Router::new()
        .route("/rank", post(rank))
        .route("/healthz", get(healthz))
        .route("/stats", get(stats))
        .route("/admin/swap", post(swap))
        .with_state(ranker)
}

/// Binds `addr` and serves in the background. Returns the bound address,
/// which differs from `addr` when port 0 was requested.
pub async fn spawn(ranker: Arc<Ranker>, addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(ranker)).await });
    Ok((bound, handle))
}

/// Adds the static console bundle in `dir` under `/console`.
pub fn with_console(app: Router, dir: &Path) -> Router {
    app.nest_service("/console", ServeDir::new(dir))
}

pub async fn serve(app: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    axum::serve(listener, app).await
}

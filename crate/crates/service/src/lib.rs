//! HTTP front end for a blinded rating study.
//!
//! Raters only ever see opaque session, item and image ids; the mapping to
//! model names stays in the export manifest on the server.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ae_lab::error::Error;
use ae_lab::eval::{
    ExportManifest, MosReport, NextItem, RatingBackend, RatingRecord, RatingSubmission, SessionConfig, SessionCreated,
    SessionRequest, IMAGE_DIR, MANIFEST_FILE, OPAQUE_ALPHABET,
};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

#[derive(Clone)]
pub struct AppState {
    backend: Arc<Mutex<RatingBackend>>,
    image_dir: PathBuf,
}

impl AppState {
    pub fn new(backend: RatingBackend, image_dir: impl Into<PathBuf>) -> Self {
        Self {
            backend: Arc::new(Mutex::new(backend)),
            image_dir: image_dir.into(),
        }
    }

    /// Loads `export_dir/manifest.json`, opens the rating log and serves
    /// images from `export_dir/img`.
    pub fn from_export(export_dir: &Path, log_path: &Path, config: SessionConfig) -> ae_lab::error::Result<Self> {
        let manifest = ExportManifest::read(export_dir.join(MANIFEST_FILE))?;
        let backend = RatingBackend::from_manifest(&manifest, log_path, config)?;
        Ok(Self::new(backend, export_dir.join(IMAGE_DIR)))
    }

    pub fn backend(&self) -> &Arc<Mutex<RatingBackend>> {
        &self.backend
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Config(_) | Error::Shape(_) | Error::Contract(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub session: String,
}

async fn create_session(State(state): State<AppState>, body: Option<Json<SessionRequest>>) -> Json<SessionCreated> {
    let request = body.map(|Json(r)| r).unwrap_or_default();
    Json(state.backend.lock().create_session(request))
}

async fn next_item(State(state): State<AppState>, Query(q): Query<NextQuery>) -> Result<Json<NextItem>, ApiError> {
    Ok(Json(state.backend.lock().schedule_next(&q.session)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub item_id: String,
    pub rating: u8,
}

async fn submit_rating(
    State(state): State<AppState>,
    Json(submission): Json<RatingSubmission>,
) -> Result<(StatusCode, Json<Accepted>), ApiError> {
    let RatingRecord { item_id, rating, .. } = state.backend.lock().record_rating(submission)?;
    Ok((StatusCode::CREATED, Json(Accepted { item_id, rating })))
}

async fn report(State(state): State<AppState>) -> Result<Json<MosReport>, ApiError> {
    Ok(Json(state.backend.lock().report()?))
}

fn is_opaque_png(file: &str) -> bool {
    file.strip_suffix(".png")
        .is_some_and(|stem| !stem.is_empty() && stem.bytes().all(|b| OPAQUE_ALPHABET.contains(&b)))
}

async fn image(State(state): State<AppState>, UrlPath(file): UrlPath<String>) -> Result<Response, ApiError> {
    if !is_opaque_png(&file) {
        return Err(Error::NotFound(format!("image `{file}`")).into());
    }
    match tokio::fs::read(state.image_dir.join(&file)).await {
        Ok(bytes) => Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(format!("image `{file}`")).into()),
        Err(e) => Err(Error::Io {
            path: state.image_dir.join(&file),
            source: e,
        }
        .into()),
    }
}

/// The rating API, plus static files from `ui_dir` for every other path.
pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/next", get(next_item))
        .route("/api/rating", post(submit_rating))
        .route("/api/report", get(report))
        .route("/img/:file", get(image))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "rating service listening");
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

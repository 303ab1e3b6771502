//! HTTP service for the two human workflows: hindsight annotation of
//! episodes and accuracy rating of relabeled instructions.
//!
//! The data directory holds `dataset.jsonl` (episodes to annotate),
//! `relabels.jsonl` (relabeled episodes to rate), the frame files named by
//! each frame's `asset_ref` (relative to the directory) and the append-only
//! `log.jsonl`.

pub mod log;
pub mod state;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dial_core::data::{parse_manifest, write_manifest, Frame};
use dial_core::DatasetManifest;
use serde::Deserialize;
use thiserror::Error;

use log::SubmissionLog;
pub use state::{
    Ack, AnnotationSubmission, AnnotationTask, RatingCandidate, RatingSubmission, RatingTask, StateSnapshot, Store,
    ANNOTATION_PROMPT, DEFAULT_QUOTA,
};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const RELABELS_FILE: &str = "relabels.jsonl";
pub const LOG_FILE: &str = "log.jsonl";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("not ready: {0}")]
    NotReady(&'static str),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("instruction is empty after normalization")]
    EmptyInstruction,
    #[error("episode {0} already has its full annotation quota")]
    QuotaReached(String),
    #[error("no ratings have been submitted")]
    EmptyReport,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("corrupt submission log: {0}")]
    CorruptLog(String),
    #[error("corrupt dataset {0}")]
    CorruptDataset(String),
    #[error("io error: {0}")]
    Io(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NotReady(_) => "NotReady",
            Self::NotFound(_) => "NotFound",
            Self::EmptyInstruction => "EmptyInstruction",
            Self::QuotaReached(_) => "QuotaReached",
            Self::EmptyReport => "EmptyReport",
            Self::BadRequest(_) => "BadRequest",
            Self::CorruptLog(_) => "CorruptLog",
            Self::CorruptDataset(_) => "CorruptDataset",
            Self::Io(_) => "Io",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            Self::NotReady(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::NotFound(_) | Self::EmptyReport => StatusCode::NOT_FOUND,
            Self::EmptyInstruction => StatusCode::UNPROCESSABLE_ENTITY,
            Self::QuotaReached(_) => StatusCode::CONFLICT,
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::CorruptLog(_) | Self::CorruptDataset(_) | Self::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub port: u16,
    pub quota: usize,
}

impl ServiceConfig {
    /// Reads `DIAL_DATA_DIR` and `DIAL_PORT`, falling back to `./data` and 8080.
    pub fn from_env() -> Result<Self, ServiceError> {
        let data_dir = std::env::var_os("DIAL_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from);
        let port = match std::env::var("DIAL_PORT") {
            Ok(p) => p.parse().map_err(|_| ServiceError::BadRequest(format!("DIAL_PORT {p:?} is not a port")))?,
            Err(_) => DEFAULT_PORT,
        };
        Ok(Self { data_dir, port, quota: DEFAULT_QUOTA })
    }
}

struct Inner {
    store: Store,
    log: SubmissionLog,
}

/// Shared service state. Appends go through one lock, so the log has a
/// single writer and every read sees a prefix of it.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    frames: Arc<HashMap<String, Frame>>,
    root: PathBuf,
}

fn load_optional(path: &Path) -> Result<Option<DatasetManifest>, ServiceError> {
    match std::fs::read(path) {
        Ok(bytes) => parse_manifest(&bytes)
            .map(Some)
            .map_err(|e| ServiceError::CorruptDataset(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ServiceError::Io(format!("{}: {e}", path.display()))),
    }
}

impl AppState {
    /// Loads the datasets found in `data_dir` and replays its log.
    pub fn open(data_dir: &Path, quota: usize) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(data_dir).map_err(|e| ServiceError::Io(format!("{}: {e}", data_dir.display())))?;
        let dataset = load_optional(&data_dir.join(DATASET_FILE))?;
        let relabels = load_optional(&data_dir.join(RELABELS_FILE))?;
        let mut store = Store::new(dataset, relabels, quota);
        let (log, records) = SubmissionLog::open(&data_dir.join(LOG_FILE))?;
        for r in &records {
            store.replay(r);
        }
        let frames = Arc::new(store.frames());
        Ok(Self { inner: Arc::new(Mutex::new(Inner { store, log })), frames, root: data_dir.to_owned() })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.lock().store.snapshot()
    }

    pub fn next_annotation_task(&self, annotator: &str) -> Result<Option<AnnotationTask>, ServiceError> {
        self.lock().store.next_annotation_task(annotator)
    }

    pub fn next_rating_task(&self, annotator: &str) -> Result<Option<RatingTask>, ServiceError> {
        self.lock().store.next_rating_task(annotator)
    }

    pub fn submit_annotation(&self, sub: &AnnotationSubmission) -> Result<Ack, ServiceError> {
        let mut inner = self.lock();
        match inner.store.prepare_annotation(sub)? {
            Ok(record) => {
                inner.log.append(&record)?;
                Ok(inner.store.commit(&record))
            }
            Err(seq) => Ok(Ack { key: log::LogRecord::annotation_key(&sub.episode_id, sub.annotator_id.trim()), stored: false, seq }),
        }
    }

    pub fn submit_rating(&self, sub: &RatingSubmission) -> Result<Ack, ServiceError> {
        let mut inner = self.lock();
        match inner.store.prepare_rating(sub)? {
            Ok(record) => {
                inner.log.append(&record)?;
                Ok(inner.store.commit(&record))
            }
            Err(seq) => Ok(Ack {
                key: log::LogRecord::rating_key(&sub.episode_id, &sub.instruction_id, sub.annotator_id.trim()),
                stored: false,
                seq,
            }),
        }
    }

    pub fn accuracy_report(&self) -> Result<dial_core::eval::EvalReport, ServiceError> {
        self.lock().store.accuracy_report()
    }

    pub fn export_annotations(&self) -> Result<DatasetManifest, ServiceError> {
        self.lock().store.export_annotations()
    }

    pub fn asset(&self, hash: &str) -> Result<(Vec<u8>, &'static str), ServiceError> {
        let frame = self.frames.get(hash).ok_or_else(|| ServiceError::NotFound(format!("asset {hash}")))?;
        let path = self.root.join(&frame.asset_ref);
        let bytes = std::fs::read(&path).map_err(|_| ServiceError::NotFound(format!("asset file {}", frame.asset_ref)))?;
        frame.verify(&bytes).map_err(|e| ServiceError::Io(e.to_string()))?;
        Ok((bytes, content_type(&frame.asset_ref)))
    }
}

fn content_type(asset_ref: &str) -> &'static str {
    let ext = asset_ref.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("ppm") => "image/x-portable-pixmap",
        _ => "application/octet-stream",
    }
}

#[derive(Deserialize)]
struct AnnotatorQuery {
    annotator: String,
}

async fn annotation_task(State(s): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ServiceError> {
    Ok(match s.next_annotation_task(&q.annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn rating_task(State(s): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ServiceError> {
    Ok(match s.next_rating_task(&q.annotator)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn annotations(State(s): State<AppState>, Json(sub): Json<AnnotationSubmission>) -> Result<Json<Ack>, ServiceError> {
    s.submit_annotation(&sub).map(Json)
}

async fn ratings(State(s): State<AppState>, Json(sub): Json<RatingSubmission>) -> Result<Json<Ack>, ServiceError> {
    s.submit_rating(&sub).map(Json)
}

async fn report(State(s): State<AppState>) -> Result<Json<dial_core::eval::EvalReport>, ServiceError> {
    s.accuracy_report().map(Json)
}

async fn asset(State(s): State<AppState>, UrlPath(hash): UrlPath<String>) -> Result<Response, ServiceError> {
    let (bytes, ty) = s.asset(&hash)?;
    Ok(([(header::CONTENT_TYPE, ty)], bytes).into_response())
}

async fn export(State(s): State<AppState>) -> Result<Response, ServiceError> {
    let manifest = s.export_annotations()?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], write_manifest(&manifest)).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks/annotation", get(annotation_task))
        .route("/annotations", post(annotations))
        .route("/tasks/rating", get(rating_task))
        .route("/ratings", post(ratings))
        .route("/reports/accuracy", get(report))
        .route("/assets/{hash}", get(asset))
        .route("/export/manifest", get(export))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::open(&config.data_dir, config.quota)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| ServiceError::Io(format!("{addr}: {e}")))?;
    axum::serve(listener, router(state)).await.map_err(|e| ServiceError::Io(e.to_string()))
}

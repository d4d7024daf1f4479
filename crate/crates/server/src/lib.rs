//! JSON-over-HTTP API for interactive predictions against one loaded
//! checkpoint.
//!
//! * `GET /api/health`: 200 once a checkpoint is loaded, 503 before.
//! * `GET /api/model`: variant, configuration, task and checkpoint hash.
//! * `POST /api/predict`: `{smiles, knowledge_text, task}` → outputs, gate
//!   values and the cross-attention matrix.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use molfuse::knowledge::KnowledgeError;
use molfuse::model::ModelError;
use molfuse::pipeline::{PipelineError, Predictor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::CorsLayer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Attention payloads are cut to this many atoms × knowledge tokens.
pub const MAX_ATTENTION_ROWS: usize = 64;
pub const MAX_ATTENTION_COLS: usize = 256;

#[derive(Clone, Default)]
pub struct AppState {
    predictor: Arc<RwLock<Option<Arc<Predictor>>>>,
}

impl AppState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_predictor(p: Predictor) -> Self {
        let s = Self::default();
        s.install(p);
        s
    }

    pub fn install(&self, p: Predictor) {
        *self.predictor.write().unwrap() = Some(Arc::new(p));
    }

    fn current(&self) -> Result<Arc<Predictor>, ApiError> {
        self.predictor.read().unwrap().clone().ok_or_else(|| {
            ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "not_ready",
                "no checkpoint loaded yet",
            )
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictRequest {
    pub smiles: String,
    pub knowledge_text: String,
    pub task: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskOutput {
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Gates {
    pub xattn: f64,
    pub dense: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Attention {
    /// Rows are atoms, columns knowledge tokens.
    pub matrix: Vec<Vec<f64>>,
    pub rows: usize,
    pub cols: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelTag {
    pub variant: String,
    pub checkpoint_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub request_hash: String,
    pub task: String,
    pub task_type: String,
    pub outputs: Vec<TaskOutput>,
    pub gates: Option<Gates>,
    pub attention: Option<Attention>,
    pub atom_tokens: Vec<String>,
    pub knowledge_tokens: Vec<String>,
    pub model: ModelTag,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                offset: None,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Smiles(p) => {
                let mut err = ApiError::new(StatusCode::BAD_REQUEST, "smiles_parse", msg);
                err.body.offset = Some(p.offset);
                err
            }
            PipelineError::Knowledge(KnowledgeError::NoTokens)
            | PipelineError::Model(ModelError::Input(_)) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_knowledge", msg)
            }
            PipelineError::Knowledge(KnowledgeError::EmptyText) | PipelineError::Data(_) => {
                ApiError::new(StatusCode::BAD_REQUEST, "validation", msg)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric", msg),
        }
    }
}

/// SHA-256 over the NUL-joined request fields.
pub fn request_hash(r: &PredictRequest) -> String {
    let mut h = Sha256::new();
    for part in [&r.smiles, &r.knowledge_text, &r.task] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

pub fn predict(p: &Predictor, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let bad = |m: &str| ApiError::new(StatusCode::BAD_REQUEST, "validation", m);
    if req.smiles.trim().is_empty() {
        return Err(bad("smiles is empty"));
    }
    if req.knowledge_text.trim().is_empty() {
        return Err(bad("knowledge_text is empty"));
    }
    if !req.task.eq_ignore_ascii_case(&p.meta.task.name) {
        return Err(bad(&format!(
            "this server predicts `{}`, not `{}`",
            p.meta.task.name, req.task
        )));
    }
    let out = p.predict(req.smiles.trim(), &req.knowledge_text)?;
    let mut atom_tokens = out.atom_tokens;
    let mut knowledge_tokens = out.knowledge_tokens;
    let attention = out.cross_attention.map(|m| {
        let truncated =
            m.len() > MAX_ATTENTION_ROWS || m.first().is_some_and(|r| r.len() > MAX_ATTENTION_COLS);
        let matrix: Vec<Vec<f64>> = m
            .into_iter()
            .take(MAX_ATTENTION_ROWS)
            .map(|r| r.into_iter().take(MAX_ATTENTION_COLS).collect())
            .collect();
        atom_tokens.truncate(MAX_ATTENTION_ROWS);
        knowledge_tokens.truncate(MAX_ATTENTION_COLS);
        Attention {
            rows: matrix.len(),
            cols: matrix.first().map_or(0, Vec::len),
            matrix,
            truncated,
        }
    });
    Ok(PredictResponse {
        request_hash: request_hash(req),
        task: p.meta.task.name.clone(),
        task_type: p.meta.task.task_type.as_str().into(),
        outputs: p
            .meta
            .label_names
            .iter()
            .zip(out.outputs)
            .map(|(label, value)| TaskOutput {
                label: label.clone(),
                value,
            })
            .collect(),
        gates: out
            .gates
            .first()
            .map(|&(xattn, dense)| Gates { xattn, dense }),
        attention,
        atom_tokens,
        knowledge_tokens,
        model: ModelTag {
            variant: p.network.config.variant.as_str().into(),
            checkpoint_hash: p.checkpoint_hash.clone(),
            version: VERSION.into(),
        },
    })
}

async fn health(State(s): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    s.current()?;
    Ok(Json(serde_json::json!({"status": "ok"})))
}

async fn model_info(State(s): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let p = s.current()?;
    Ok(Json(serde_json::json!({
        "variant": p.network.config.variant,
        "task": p.meta.task.name,
        "task_type": p.meta.task.task_type,
        "label_names": p.meta.label_names,
        "model": p.network.config,
        "provider": p.meta.provider,
        "best_epoch": p.meta.best_epoch,
        "valid_metric": p.meta.valid_metric,
        "checkpoint_hash": p.checkpoint_hash,
        "version": VERSION,
    })))
}

async fn predict_handler(
    State(s): State<AppState>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "validation", e.body_text()))?;
    let p = s.current()?;
    let resp = tokio::task::spawn_blocking(move || predict(&p, &req))
        .await
        .map_err(|e| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric", e.to_string())
        })??;
    Ok(Json(resp))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(model_info))
        .route("/api/predict", post(predict_handler))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds, then loads the checkpoint in the background so `/api/health`
/// reports 503 until it is ready. A checkpoint that fails to load stops the
/// server with that error.
pub async fn serve(addr: SocketAddr, checkpoint: std::path::PathBuf) -> Result<(), ServeError> {
    let state = AppState::empty();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<PipelineError>();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match Predictor::load(&checkpoint) {
        Ok(p) => {
            log::info!("loaded {} ({})", checkpoint.display(), p.checkpoint_hash);
            loader.install(p);
        }
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let slot = failure.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            if let Ok(e) = fail_rx.await {
                *slot.lock().unwrap() = Some(e);
            } else {
                std::future::pending::<()>().await;
            }
        })
        .await?;
    let err = failure.lock().unwrap().take();
    match err {
        Some(e) => Err(ServeError::Checkpoint(e)),
        None => Ok(()),
    }
}

#[derive(Debug)]
pub enum ServeError {
    Io(std::io::Error),
    Checkpoint(PipelineError),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Io(e) => e.fmt(f),
            ServeError::Checkpoint(e) => write!(f, "cannot load checkpoint: {e}"),
        }
    }
}

impl std::error::Error for ServeError {}

impl From<std::io::Error> for ServeError {
    fn from(e: std::io::Error) -> Self {
        ServeError::Io(e)
    }
}

//! HTTP query service over one gallery loaded at startup.
//!
//! `POST /v1/query` runs the same two-stage retrieval as the CLI;
//! `GET /v1/health` reports gallery metadata. Both answer 503 until the
//! gallery has finished loading.

use std::fs::File;
use std::future::IntoFuture;
use std::io::{self, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use effo_core::feature_store::{self, FeatureSet, LocalFeature, NORM_TOLERANCE};
use effo_core::pipeline::{self, PipelineError, RetrievalParams, RetrievedEntry, DEFAULT_K};
use effo_core::ranker;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shared, read-only after the gallery is set.
#[derive(Debug, Default)]
pub struct AppState {
    gallery: OnceLock<FeatureSet>,
}

impl AppState {
    /// A state whose gallery is still loading.
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn loaded(gallery: FeatureSet) -> Arc<Self> {
        let state = Self::default();
        let _ = state.gallery.set(gallery);
        Arc::new(state)
    }

    /// Installs the gallery. Fails if one is already installed.
    pub fn set_gallery(&self, gallery: FeatureSet) -> Result<(), FeatureSet> {
        self.gallery.set(gallery)
    }

    pub fn gallery(&self) -> Option<&FeatureSet> {
        self.gallery.get()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryLocal {
    pub score: f32,
    pub descriptor: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub global_descriptor: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locals: Option<Vec<QueryLocal>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<f32>,
    #[serde(default = "default_rerank")]
    pub rerank: bool,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_rerank() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub first_stage_similarity: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnn_count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub rank_ms: f64,
    pub rerank_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryResult>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub gallery_size: usize,
    pub d_g: usize,
    pub d_l: usize,
    pub version: String,
}

/// An error response: `{"error": ..., "field": ...}` with an HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            field,
            message: message.into(),
        }
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, None, "gallery not loaded")
    }

    fn unprocessable(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, Some(field.into()), message)
    }

    fn dimension(field: String, expected: usize, found: usize) -> Self {
        let message = format!("{field}: expected {expected} values, got {found}");
        Self::new(StatusCode::BAD_REQUEST, Some(field), message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.message,
            field: self.field.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

/// Decodes a request body. Every syntax, type or unknown-field error is a
/// 422.
pub fn parse_request(body: &[u8]) -> Result<QueryRequest, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, None, format!("invalid request: {e}"))
    })
}

/// A request checked against a gallery, ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidQuery {
    pub global: Vec<f32>,
    pub locals: Vec<LocalFeature>,
    pub params: RetrievalParams,
}

fn check_unit(field: String, v: &[f32]) -> Result<(), ApiError> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(ApiError::unprocessable(format!("{field}[{i}]"), "value is not finite"));
    }
    let norm = effo_core::linalg::norm(v);
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(ApiError::unprocessable(
            field.clone(),
            format!("{field}: L2 norm {norm} is not 1"),
        ));
    }
    Ok(())
}

/// Dimension mismatches are 400; other invalid fields are 422.
pub fn validate_request(req: QueryRequest, gallery: &FeatureSet) -> Result<ValidQuery, ApiError> {
    if req.global_descriptor.len() != gallery.d_g {
        return Err(ApiError::dimension(
            "global_descriptor".into(),
            gallery.d_g,
            req.global_descriptor.len(),
        ));
    }
    let locals = req.locals.unwrap_or_default();
    for (i, f) in locals.iter().enumerate() {
        if f.descriptor.len() != gallery.d_l {
            return Err(ApiError::dimension(
                format!("locals[{i}].descriptor"),
                gallery.d_l,
                f.descriptor.len(),
            ));
        }
    }
    check_unit("global_descriptor".into(), &req.global_descriptor)?;
    for (i, f) in locals.iter().enumerate() {
        if !f.score.is_finite() {
            return Err(ApiError::unprocessable(format!("locals[{i}].score"), "value is not finite"));
        }
        check_unit(format!("locals[{i}].descriptor"), &f.descriptor)?;
    }
    let defaults = RetrievalParams::default();
    let params = RetrievalParams {
        k: req.k,
        t1: req.t1.unwrap_or(defaults.t1),
        t2: req.t2.unwrap_or(defaults.t2),
        rerank: req.rerank,
    };
    if params.k == 0 {
        return Err(ApiError::unprocessable("k", "k must be at least 1"));
    }
    if let Err(e) = params.check() {
        let field = if !params.t1.is_finite() { "t1" } else { "t2" };
        return Err(ApiError::unprocessable(field, e.to_string()));
    }
    Ok(ValidQuery {
        global: req.global_descriptor,
        locals: locals
            .into_iter()
            .map(|f| LocalFeature {
                score: f.score,
                descriptor: f.descriptor,
            })
            .collect(),
        params,
    })
}

fn internal(e: PipelineError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string())
}

/// Runs a validated query. Produces the same order as
/// [`pipeline::retrieve`] with the same parameters.
pub fn run_query(gallery: &FeatureSet, q: &ValidQuery) -> Result<QueryResponse, ApiError> {
    let start = Instant::now();
    let first = ranker::rank(&q.global, gallery, q.params.k).map_err(|e| internal(e.into()))?;
    let rank_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let entries: Vec<RetrievedEntry> = if q.params.rerank {
        pipeline::rerank_stage(gallery, &q.locals, &first, q.params.t1, q.params.t2).map_err(internal)?
    } else {
        first
            .entries
            .iter()
            .map(|e| RetrievedEntry {
                gallery_index: e.gallery_index,
                similarity: e.similarity,
                mnn_count: None,
            })
            .collect()
    };
    let rerank_ms = if q.params.rerank {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok(QueryResponse {
        results: entries
            .iter()
            .map(|e| QueryResult {
                id: gallery.records[e.gallery_index].id.clone(),
                first_stage_similarity: e.similarity,
                mnn_count: e.mnn_count,
            })
            .collect(),
        timings: Timings { rank_ms, rerank_ms },
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let g = state.gallery().ok_or_else(ApiError::unavailable)?;
    Ok(Json(Health {
        status: "ok".into(),
        gallery_size: g.len(),
        d_g: g.d_g,
        d_l: g.d_l,
        version: VERSION.into(),
    }))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    if state.gallery().is_none() {
        return Err(ApiError::unavailable());
    }
    let req = parse_request(&body)?;
    tokio::task::spawn_blocking(move || {
        let gallery = state.gallery().ok_or_else(ApiError::unavailable)?;
        let q = validate_request(req, gallery)?;
        run_query(gallery, &q)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string()))?
    .map(Json)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/health", get(health))
        .with_state(state)
}

/// Reads and validates a gallery file.
pub fn load_gallery(path: &Path) -> io::Result<FeatureSet> {
    let file = File::open(path)?;
    let set = feature_store::read_feature_set(BufReader::new(file)).map_err(io::Error::other)?;
    let report = feature_store::validate(&set);
    if let Some(v) = report.violations.first() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: {} violation(s), first: {v}", path.display(), report.violations.len()),
        ));
    }
    Ok(set)
}

async fn shutdown_signal() {
    let _ = tokio::signal::ctrl_c().await;
}

/// Binds `addr`, starts answering immediately (503 while loading) and
/// loads the gallery in the background. Returns when the server stops or
/// the gallery fails to load.
pub async fn serve(addr: SocketAddr, gallery_path: PathBuf) -> io::Result<()> {
    let state = AppState::new();
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    let server = axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .into_future();
    tokio::pin!(server);
    let load = tokio::task::spawn_blocking(move || load_gallery(&gallery_path));
    tokio::select! {
        res = &mut server => return res,
        loaded = load => {
            let set = loaded.map_err(io::Error::other)??;
            eprintln!("gallery loaded: {} records, d_g={}, d_l={}", set.len(), set.d_g, set.d_l);
            let _ = state.set_gallery(set);
        }
    }
    server.await
}

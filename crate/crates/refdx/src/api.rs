//! HTTP/JSON routes over an [`Engine`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use refdx_core::manifest::ManifestRecord;
use serde::{Deserialize, Serialize};

use crate::engine::{CalibrateRequest, DiagnoseOptions, Engine, QueryInput};
use crate::error::ServiceError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseRequest {
    #[serde(default)]
    pub vector: Option<Vec<f32>>,
    /// Base64 PNG or JPEG, routed through the toy featurizer.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub theta: Option<f64>,
}

impl DiagnoseRequest {
    fn split(self) -> (QueryInput, DiagnoseOptions) {
        (
            QueryInput { vector: self.vector, image: self.image },
            DiagnoseOptions { k: self.k, n: self.n, theta: self.theta },
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    #[serde(default)]
    pub vector: Option<Vec<f32>>,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRequest {
    pub site_id: String,
    /// Server-side JSON-lines manifest.
    #[serde(default)]
    pub manifest_path: Option<PathBuf>,
    #[serde(default)]
    pub items: Option<Vec<ManifestRecord>>,
}

pub struct ApiError(pub ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0.body())).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError(ServiceError::BadRequest(e.body_text())))
}

/// Runs engine work off the async executor.
async fn blocking<T, F>(engine: &Arc<Engine>, endpoint: &'static str, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    let engine = engine.clone();
    engine.count_request(endpoint);
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError(ServiceError::BadRequest(format!("worker failed: {e}"))))?
        .map(Json)
        .map_err(ApiError)
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/v1/diagnose", post(diagnose))
        .route("/v1/diagnose/confident", post(diagnose_confident))
        .route("/v1/retrieve", post(retrieve))
        .route("/v1/libraries/augment", post(augment))
        .route("/v1/calibrate", post(calibrate))
        .route("/v1/metrics", get(metrics))
        .route("/v1/health", get(health))
        .with_state(engine)
}

async fn diagnose(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<DiagnoseRequest>, JsonRejection>,
) -> impl IntoResponse {
    let (query, opts) = body(payload)?.split();
    blocking(&engine, "diagnose", move |e| e.diagnose(&query, &opts)).await
}

async fn diagnose_confident(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<DiagnoseRequest>, JsonRejection>,
) -> impl IntoResponse {
    let (query, opts) = body(payload)?.split();
    blocking(&engine, "diagnose_confident", move |e| e.diagnose_confident(&query, &opts)).await
}

async fn retrieve(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<RetrieveRequest>, JsonRejection>,
) -> impl IntoResponse {
    let req = body(payload)?;
    let query = QueryInput { vector: req.vector, image: req.image };
    blocking(&engine, "retrieve", move |e| e.retrieve(&query, req.k)).await
}

async fn augment(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<AugmentRequest>, JsonRejection>,
) -> impl IntoResponse {
    let req = body(payload)?;
    blocking(&engine, "augment", move |e| match (req.manifest_path, req.items) {
        (Some(path), None) => e.augment_from_manifest(&req.site_id, &path),
        (None, Some(items)) => e.augment(&req.site_id, &items),
        _ => Err(ServiceError::BadRequest("provide exactly one of `manifest_path` or `items`".into())),
    })
    .await
}

async fn calibrate(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<CalibrateRequest>, JsonRejection>,
) -> impl IntoResponse {
    let req = body(payload)?;
    blocking(&engine, "calibrate", move |e| e.calibrate(&req)).await
}

async fn metrics(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    blocking(&engine, "metrics", |e| e.metrics()).await
}

async fn health(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    blocking(&engine, "health", |e| Ok(e.health())).await
}

/// Binds `listen_address` and serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>) -> Result<(), ServiceError> {
    let addr = engine.config().listen_address.clone();
    let listener =
        tokio::net::TcpListener::bind(&addr).await.map_err(|e| ServiceError::io(format!("bind {addr}"), e))?;
    let local = listener.local_addr().map_err(|e| ServiceError::io("local address", e))?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::io("serve", e))
}

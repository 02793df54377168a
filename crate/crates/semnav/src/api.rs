//! HTTP endpoints. JSON bodies carry rasters as base64-encoded PNM files;
//! label uploads and overlays are raw PNM with `application/octet-stream`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use semnav_core::fewshot::{FewshotHead, SupportExample};
use semnav_core::frugal::FrugalConfig;
use semnav_core::irl::{DemoSet, IrlConfig};
use semnav_core::raster::{load_image, BinaryMask, ImageRaster, LabelPalette};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ServiceError;
use crate::scenario::HeadTraining;
use crate::service::{ClassSpec, JobSpec, RouteRequest, Service};

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({"error": self.0.kind(), "message": self.0.to_string()}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Body of `POST /workspaces`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CreateWorkspace {
    /// Base64 PPM or PGM.
    pub image: String,
    pub palette: LabelPalette,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SupportPair {
    /// Base64 PPM or PGM.
    pub image: String,
    /// Base64 PGM; nonzero samples are foreground.
    pub mask: String,
}

/// Body of `POST /workspaces/{id}/classes`.
#[derive(Debug, Serialize, Deserialize)]
pub struct AddClass {
    pub name: String,
    pub color: [u8; 3],
    pub supports: Vec<SupportPair>,
    /// A trained head to use. Without one the workspace head is reused, or
    /// a head is trained with `training` and stored.
    #[serde(default)]
    pub head: Option<FewshotHead>,
    #[serde(default)]
    pub training: Option<HeadTraining>,
}

/// Body of `POST /workspaces/{id}/jobs/train-irl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainIrl {
    pub profile: String,
    pub demos: DemoSet,
    #[serde(default)]
    pub config: Option<IrlConfig>,
}

#[derive(Debug, Deserialize)]
struct OverlayQuery {
    layer: String,
}

pub fn encode_raster(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ServiceError> {
    STANDARD
        .decode(text)
        .map_err(|e| ServiceError::Invalid(format!("{field}: invalid base64: {e}")))
}

fn decode_image(field: &str, text: &str) -> Result<ImageRaster, ServiceError> {
    load_image(&decode_b64(field, text)?).map_err(|e| ServiceError::Invalid(format!("{field}: {e}")))
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("malformed request body: {e}")))
}

fn accepted(job: &str) -> Response {
    (StatusCode::ACCEPTED, Json(json!({"job": job}))).into_response()
}

fn spawn(service: &Arc<Service>, id: &str, spec: JobSpec) -> ApiResult<Response> {
    let pending = service.submit(id, spec)?;
    let job = pending.id().to_string();
    let service = service.clone();
    tokio::task::spawn_blocking(move || service.execute(pending));
    Ok(accepted(&job))
}

async fn create_workspace(State(service): State<Arc<Service>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateWorkspace = parse_json(&body)?;
    let image = decode_image("image", &req.image)?;
    let id = service.create_workspace(image, req.palette)?;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

async fn get_workspace(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(service.summary(&id)?).into_response())
}

async fn upload_labels(State(service): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let fraction = service.set_labels(&id, &body)?;
    Ok(Json(json!({"labeled_fraction": fraction})).into_response())
}

async fn train_seg(State(service): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let config: FrugalConfig = if body.iter().all(u8::is_ascii_whitespace) {
        FrugalConfig::default()
    } else {
        parse_json(&body)?
    };
    spawn(&service, &id, JobSpec::TrainSeg(config))
}

async fn add_class(State(service): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: AddClass = parse_json(&body)?;
    let mut supports = Vec::with_capacity(req.supports.len());
    for (i, pair) in req.supports.iter().enumerate() {
        let image = decode_image(&format!("supports[{i}].image"), &pair.image)?;
        let mask = BinaryMask::load(&decode_b64(&format!("supports[{i}].mask"), &pair.mask)?)
            .map_err(|e| ServiceError::Invalid(format!("supports[{i}].mask: {e}")))?;
        supports.push(
            SupportExample::new(image, mask).map_err(|e| ServiceError::Invalid(format!("supports[{i}]: {e}")))?,
        );
    }
    let spec = ClassSpec {
        name: req.name,
        color: req.color,
        supports,
        head: req.head,
        training: req.training.unwrap_or_default(),
    };
    spawn(&service, &id, JobSpec::AddClass(spec))
}

async fn train_irl(State(service): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: TrainIrl = parse_json(&body)?;
    spawn(
        &service,
        &id,
        JobSpec::TrainIrl {
            profile: req.profile,
            demos: req.demos,
            config: req.config.unwrap_or_default(),
        },
    )
}

async fn route(State(service): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: RouteRequest = parse_json(&body)?;
    Ok(Json(service.route(&id, &req)?).into_response())
}

async fn overlay(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let bytes = service.overlay(&id, &q.layer)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn job(State(service): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(service.job(&id)?).into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/workspaces", post(create_workspace))
        .route("/workspaces/{id}", get(get_workspace))
        .route("/workspaces/{id}/labels", post(upload_labels))
        .route("/workspaces/{id}/jobs/train-seg", post(train_seg))
        .route("/workspaces/{id}/classes", post(add_class))
        .route("/workspaces/{id}/jobs/train-irl", post(train_irl))
        .route("/workspaces/{id}/routes", post(route))
        .route("/workspaces/{id}/overlay", get(overlay))
        .route("/jobs/{id}", get(job))
        .layer(axum::extract::DefaultBodyLimit::max(256 << 20))
        .with_state(service)
}

pub async fn serve(addr: SocketAddr, service: Arc<Service>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

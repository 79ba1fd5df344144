//! HTTP interface of the triage service.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use super::store::{
    classify, item_id, sha256_hex, Action, AnnotateError, AnnotationRequest, IngestedImage, StatusFilter, Store,
    TriageItem,
};
use crate::error::Error;
use crate::zoo::Model;

pub struct AppState {
    pub store: Store,
    pub model: Model,
    pub checkpoint_digest: String,
    pub token: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::InvalidArgument(_) | Error::UnknownLabel(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Error::Image { .. } | Error::ImageTooSmall { .. } | Error::Upsample { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "unreadable_image")
            }
            Error::Empty(_) => (StatusCode::NOT_FOUND, "no_data"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        ApiError::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>, max_upload_bytes: usize) -> Router {
    let api = Router::new()
        .route("/images", post(upload_images))
        .route("/items", get(list_items))
        .route("/items/{id}", get(get_item))
        .route("/items/{id}/image", get(get_image))
        .route("/queue", get(queue))
        .route("/annotations", post(annotate))
        .route("/events", get(events))
        .route("/reports/live", get(live_report))
        .route("/export/manifest", get(export_manifest))
        .route("/export/predictions", get(export_predictions))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(max_upload_bytes));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

async fn require_token(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    req: axum::extract::Request,
    next: Next,
) -> Response {
    if let Some(token) = &state.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    items: usize,
    events: usize,
    checkpoint_digest: String,
    architecture: String,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        items: state.store.len(),
        events: state.store.events().len(),
        checkpoint_digest: state.checkpoint_digest.clone(),
        architecture: state.model.spec.architecture.to_string(),
    })
}

#[derive(Serialize)]
struct Uploaded {
    created: bool,
    #[serde(flatten)]
    item: TriageItem,
}

#[derive(Serialize)]
struct UploadResponse {
    items: Vec<Uploaded>,
}

/// Classifies and stores one upload; repeated uploads return the existing
/// item.
fn ingest_one(state: &AppState, file_name: Option<String>, bytes: Bytes) -> Result<Uploaded, Error> {
    let image_digest = sha256_hex(&bytes);
    let record_id = item_id(&image_digest, &state.checkpoint_digest);
    if let Some(item) = state.store.get(&record_id) {
        return Ok(Uploaded { created: false, item });
    }
    let (width, height, activations) = classify(&state.model, &bytes)?;
    let img = IngestedImage {
        record_id,
        image_digest,
        checkpoint_digest: state.checkpoint_digest.clone(),
        file_name,
        width,
        height,
        activations,
        ingested_at: Utc::now(),
    };
    let (item, created) = state.store.insert(img, &bytes)?;
    Ok(Uploaded { created, item })
}

async fn upload_images(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> ApiResult<Json<UploadResponse>> {
    let mut files = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?
    {
        let name = field.file_name().map(str::to_string);
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
        files.push((name, bytes));
    }
    let items = tokio::task::spawn_blocking(move || {
        files
            .into_iter()
            .map(|(name, bytes)| ingest_one(&state, name, bytes))
            .collect::<Result<Vec<_>, Error>>()
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(UploadResponse { items }))
}

async fn list_items(State(state): State<Arc<AppState>>) -> Json<Vec<TriageItem>> {
    Json(state.store.items())
}

async fn get_item(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<TriageItem>> {
    state
        .store
        .get(&id)
        .map(Json)
        .ok_or_else(|| Error::NotFound(format!("item {id}")).into())
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let item = state.store.get(&id).ok_or_else(|| Error::NotFound(format!("item {id}")))?;
    let path = state.store.image_path(&item.image_digest);
    let bytes = tokio::fs::read(&path).await.map_err(|e| Error::Io { path, source: e })?;
    let mime = match image::guess_format(&bytes) {
        Ok(image::ImageFormat::Png) => "image/png",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Deserialize)]
struct QueueParams {
    strategy: Option<String>,
    status: Option<StatusFilter>,
    offset: Option<usize>,
    limit: Option<usize>,
}

const MAX_PAGE: usize = 500;

async fn queue(
    State(state): State<Arc<AppState>>,
    Query(q): Query<QueueParams>,
) -> ApiResult<Json<super::store::QueuePage>> {
    let strategy = q.strategy.as_deref().unwrap_or("top2");
    let n = match strategy {
        "top1" => 1,
        "top2" => 2,
        "top3" => 3,
        other => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "bad_request",
                format!("strategy must be top1, top2 or top3, got {other:?}"),
            ))
        }
    };
    let limit = q.limit.unwrap_or(50).min(MAX_PAGE);
    let page = state
        .store
        .queue(n, q.status.unwrap_or_default(), q.offset.unwrap_or(0), limit)?;
    Ok(Json(page))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    record_id: String,
    action: String,
    label: Option<String>,
    reviewer: String,
    idempotency_key: Option<String>,
    expected_version: Option<u64>,
}

async fn annotate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: AnnotationBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    let action = Action::parse(&body.action, body.label.as_deref())?;
    let req = AnnotationRequest {
        record_id: body.record_id,
        action,
        reviewer: body.reviewer,
        idempotency_key: body.idempotency_key,
        expected_version: body.expected_version,
    };
    // The store syncs to disk before returning; keep that off the runtime.
    let result = tokio::task::spawn_blocking(move || state.store.annotate(req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(a) => {
            let status = if a.appended { StatusCode::CREATED } else { StatusCode::OK };
            Ok((status, Json(a)).into_response())
        }
        Err(AnnotateError::Conflict(c)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "version_conflict",
            format!("item is at version {}, request expected {}", c.actual, c.expected),
        )),
        Err(AnnotateError::Other(e)) => Err(e.into()),
    }
}

fn ndjson<T: Serialize>(rows: &[T]) -> ApiResult<Response> {
    let mut body = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut body, r).map_err(Error::from)?;
        body.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn events(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    ndjson(&state.store.events())
}

#[derive(Serialize)]
struct LiveReport {
    annotated: usize,
    #[serde(flatten)]
    report: crate::evaluator::EvalReport,
}

async fn live_report(State(state): State<Arc<AppState>>) -> ApiResult<Json<LiveReport>> {
    let report = state.store.metrics_report()?;
    Ok(Json(LiveReport {
        annotated: report.records,
        report,
    }))
}

async fn export_manifest(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    ndjson(&state.store.export_manifest().records)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    record_id: &'a str,
    true_label: crate::labels::ClassLabel,
    activations: &'a [f64],
}

async fn export_predictions(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let preds = state.store.annotated_predictions();
    let lines: Vec<PredictionLine> = preds
        .iter()
        .map(|p| PredictionLine {
            record_id: &p.record_id,
            true_label: p.true_label,
            activations: &p.activations,
        })
        .collect();
    ndjson(&lines)
}

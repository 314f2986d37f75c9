//! HTTP inference service.
//!
//! ```text
//! GET  /schema    served attribute schema
//! POST /generate  {photo: base64 PNG, attributes: {type: value}}
//! GET  /health    {status, model_id, uptime_s}
//! ```
//!
//! Every error body is `{"code": …, "message": …}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use portrait_core::checkpoint::load_checkpoint;
use portrait_core::dataset::{decode_png, encode_png};
use portrait_core::generator::Generator;
use portrait_core::training::{denormalize, normalize};
use portrait_core::{AttributeSchema, AttributeSet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;

/// A loaded checkpoint, read-only once built.
pub struct Model {
    pub generator: Generator<f32>,
    pub schema: AttributeSchema,
    pub model_id: String,
    schema_body: String,
}

impl Model {
    pub fn new(generator: Generator<f32>, schema: AttributeSchema, model_id: String) -> Self {
        let types: Vec<Value> =
            schema.types().iter().map(|t| json!({ "name": t.name, "values": t.values })).collect();
        let schema_body = serde_json::to_string(&json!({ "types": types })).expect("schema serializes");
        Self { generator, schema, model_id, schema_body }
    }

    pub fn load(dir: impl AsRef<Path>) -> portrait_core::Result<Self> {
        let ck = load_checkpoint(dir, None)?;
        Ok(Self::new(ck.state.generator, ck.schema, ck.model_id))
    }

    pub fn image_size(&self) -> usize {
        self.generator.config.image_size
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<RwLock<Option<Arc<Model>>>>,
    started: Instant,
}

impl Default for AppState {
    fn default() -> Self {
        Self::empty()
    }
}

impl AppState {
    /// No model yet: generation and health answer 503 until [`AppState::swap`].
    pub fn empty() -> Self {
        Self { model: Arc::new(RwLock::new(None)), started: Instant::now() }
    }

    pub fn with_model(model: Model) -> Self {
        let s = Self::empty();
        s.swap(model);
        s
    }

    /// Replaces the served model; requests already running keep the old one.
    pub fn swap(&self, model: Model) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    fn current(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock").clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_loaded", "no checkpoint is loaded")
    }

    fn bad_field(field: &str, message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", format!("{field}: {message}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub portrait: String,
    pub applied_attributes: BTreeMap<String, String>,
    pub model_id: String,
}

async fn schema(State(state): State<AppState>) -> Result<Response, ApiError> {
    let model = state.current().ok_or_else(ApiError::not_loaded)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], model.schema_body.clone()).into_response())
}

async fn health(State(state): State<AppState>) -> Response {
    let uptime_s = state.started.elapsed().as_secs_f64();
    match state.current() {
        Some(m) => Json(json!({ "status": "ok", "model_id": m.model_id, "uptime_s": uptime_s })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({
                "code": "not_loaded",
                "message": "no checkpoint is loaded",
                "status": "loading",
                "uptime_s": uptime_s,
            })),
        )
            .into_response(),
    }
}

fn parse_attributes(value: Option<&Value>, schema: &AttributeSchema) -> Result<AttributeSet, ApiError> {
    let mut attrs = AttributeSet::new();
    let Some(value) = value else { return Ok(attrs) };
    let map = value.as_object().ok_or_else(|| ApiError::bad_field("attributes", "must be an object of type → value"))?;
    for (ty, v) in map {
        let field = format!("attributes.{ty}");
        let v = v.as_str().ok_or_else(|| ApiError::bad_field(&field, "value must be a string"))?;
        let (ty, v) =
            schema.parse_assignment(&format!("{ty}={v}")).map_err(|e| ApiError::bad_field(&field, e))?;
        attrs.insert(ty, v);
    }
    Ok(attrs)
}

fn run_generate(model: &Model, body: &[u8]) -> Result<GenerateResponse, ApiError> {
    let request: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_field("body", e))?;
    let photo = request
        .get("photo")
        .and_then(Value::as_str)
        .ok_or_else(|| ApiError::bad_field("photo", "missing base64 PNG string"))?;
    let attrs = parse_attributes(request.get("attributes"), &model.schema)?;
    let bytes = STANDARD.decode(photo.trim()).map_err(|e| ApiError::bad_field("photo", e))?;
    let img = decode_png(&bytes, model.image_size()).map_err(|e| ApiError::bad_field("photo", e))?;
    let out = model
        .generator
        .generate(&normalize(&img), &attrs, &model.schema)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "generation_failed", e.to_string()))?;
    let png = encode_png(&denormalize(&out))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encoding_failed", e.to_string()))?;
    Ok(GenerateResponse {
        portrait: STANDARD.encode(png),
        applied_attributes: attrs.iter().map(|(t, v)| (t.to_string(), v.to_string())).collect(),
        model_id: model.model_id.clone(),
    })
}

async fn generate(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<GenerateResponse>, ApiError> {
    let body = body.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(r.status(), "payload_too_large", format!("request body exceeds {MAX_BODY_BYTES} bytes"))
        } else {
            ApiError::new(r.status(), "invalid_body", r.body_text())
        }
    })?;
    let model = state.current().ok_or_else(ApiError::not_loaded)?;
    tokio::task::spawn_blocking(move || run_generate(&model, &body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map(Json)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/generate", post(generate))
        .route("/health", get(health))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until the process is interrupted.
pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

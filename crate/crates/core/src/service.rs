//! HTTP/JSON façade over generation and a content-addressed slider
//! registry.
//!
//! Routes:
//! - `GET /sliders`: registered sliders, ordered by id.
//! - `POST /sliders`: multipart upload of one `.slider` file; returns its id.
//! - `POST /generate`: a [`GenerationRequest`]; returns a base64 PNG.
//!
//! The model is shared read-only. Uploads hold the registry write lock only
//! while inserting; generation clones the `Arc`s it needs and runs on the
//! blocking pool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::container::sha256_hex;
use crate::error::Error;
use crate::inference::{generate_with_sliders, GenerationConfig};
use crate::lora::{LoRAAdaptor, SliderHandle};
use crate::model::DenoiserModel;

pub const SLIDER_EXTENSION: &str = "slider";
const MAX_UPLOAD: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderInfo {
    pub id: String,
    pub name: String,
    pub rank: usize,
    pub layers: Vec<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Sliders keyed by the SHA-256 of their file bytes. With a directory,
/// uploads are persisted as `<id>.slider`.
#[derive(Debug, Default)]
pub struct Registry {
    dir: Option<PathBuf>,
    entries: BTreeMap<String, Arc<LoRAAdaptor>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads every `.slider` file in `dir` (created if missing). Ids are
    /// recomputed from content, so renamed files keep their identity.
    pub fn open(dir: &Path, model: &DenoiserModel) -> crate::error::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut reg = Self {
            dir: Some(dir.to_path_buf()),
            entries: BTreeMap::new(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == SLIDER_EXTENSION))
            .collect();
        paths.sort();
        for p in paths {
            let bytes = std::fs::read(&p)?;
            let adaptor = LoRAAdaptor::from_bytes(&bytes, model)?;
            reg.entries.insert(content_id(&bytes), Arc::new(adaptor));
        }
        Ok(reg)
    }

    /// Validates and registers a slider file; returns its id.
    pub fn register(&mut self, bytes: &[u8], model: &DenoiserModel) -> crate::error::Result<String> {
        let adaptor = LoRAAdaptor::from_bytes(bytes, model)?;
        let id = content_id(bytes);
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{id}.{SLIDER_EXTENSION}"));
            if !path.exists() {
                crate::container::write_file(&path, bytes)?;
            }
        }
        self.entries.insert(id.clone(), Arc::new(adaptor));
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<LoRAAdaptor>> {
        self.entries.get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn list(&self) -> Vec<SliderInfo> {
        self.entries
            .iter()
            .map(|(id, a)| SliderInfo {
                id: id.clone(),
                name: a.name.clone(),
                rank: a.rank,
                layers: a.layer_ids(),
                metadata: a.metadata.clone(),
            })
            .collect()
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

pub struct AppState {
    pub model: Arc<DenoiserModel>,
    pub registry: RwLock<Registry>,
}

impl AppState {
    pub fn new(model: DenoiserModel, registry: Registry) -> Arc<Self> {
        Arc::new(Self {
            model: Arc::new(model),
            registry: RwLock::new(registry),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliderSetting {
    pub id: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResponseFormat {
    #[default]
    #[serde(rename = "png-base64")]
    PngBase64,
}

/// Everything that determines one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    /// Caption tokens; empty for the unconditional model.
    #[serde(default)]
    pub caption: Vec<String>,
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg")]
    pub cfg_scale: f64,
    #[serde(default = "default_frac")]
    pub sdedit_frac: f64,
    #[serde(default)]
    pub sliders: Vec<SliderSetting>,
    #[serde(default)]
    pub response_format: ResponseFormat,
}

fn default_steps() -> usize {
    GenerationConfig::default().steps
}

fn default_cfg() -> f64 {
    GenerationConfig::default().cfg_scale
}

fn default_frac() -> f64 {
    GenerationConfig::default().sdedit_frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generate_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub image: String,
    pub format: ResponseFormat,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub id: String,
}

/// JSON error body: `{"error": ..., "field": ...}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: field.map(str::to_string),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let field = match &e {
            Error::Range { what, .. } => Some((*what).to_string()),
            Error::UnknownToken(_) => Some("caption".to_string()),
            _ => None,
        };
        let status = match e {
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Diverged { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            message: e.to_string(),
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "field": self.field });
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sliders", get(list_sliders).post(upload_slider))
        .route("/generate", axum::routing::post(generate))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn list_sliders(State(state): State<Arc<AppState>>) -> Json<Vec<SliderInfo>> {
    Json(state.registry.read().expect("registry lock").list())
}

async fn upload_slider(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Result<Json<UploadResponse>, ApiError> {
    let mut bytes = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("multipart: {e}"), None))?
    {
        if bytes.is_none() {
            bytes = Some(
                field
                    .bytes()
                    .await
                    .map_err(|e| ApiError::bad_request(format!("multipart: {e}"), None))?,
            );
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::bad_request("no file in upload", Some("file")))?;
    let model = state.model.clone();
    // Parse and validate outside the lock; only the insert is exclusive.
    LoRAAdaptor::from_bytes(&bytes, &model)?;
    let id = state.registry.write().expect("registry lock").register(&bytes, &model)?;
    Ok(Json(UploadResponse { id }))
}

/// Maps a serde error onto the request field it concerns.
fn body_error(e: serde_json::Error) -> ApiError {
    let msg = e.to_string();
    let field = ["caption", "seed", "steps", "cfg_scale", "sdedit_frac", "sliders", "response_format", "alpha", "id"]
        .into_iter()
        .find(|f| msg.contains(&format!("`{f}`")));
    ApiError::bad_request(format!("malformed request: {msg}"), field)
}

pub fn parse_request(body: &[u8]) -> Result<GenerationRequest, ApiError> {
    serde_json::from_slice(body).map_err(body_error)
}

/// Runs a request against a model and registry snapshot. Pure in its
/// inputs: equal requests give equal images.
pub fn render_request(
    model: &DenoiserModel,
    sliders: &[(Arc<LoRAAdaptor>, f64)],
    request: &GenerationRequest,
) -> Result<GenerationResponse, ApiError> {
    let condition = model.vocab().phrase_from_words(&request.caption)?;
    let handles = sliders
        .iter()
        .map(|(a, alpha)| SliderHandle::new(a, *alpha))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let config = GenerationConfig {
        steps: request.steps,
        cfg_scale: request.cfg_scale,
        sdedit_frac: request.sdedit_frac,
    };
    if !config.cfg_scale.is_finite() {
        return Err(ApiError::bad_request("cfg_scale must be finite", Some("cfg_scale")));
    }
    let start = Instant::now();
    let image = generate_with_sliders(model, &handles, &condition, request.seed, &config)?;
    let png = image.to_png()?;
    Ok(GenerationResponse {
        image: base64::engine::general_purpose::STANDARD.encode(png),
        format: request.response_format,
        width: image.width(),
        height: image.height(),
        seed: request.seed,
        timing: Timing {
            generate_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<GenerationResponse>, ApiError> {
    let request = parse_request(&body)?;
    let sliders = {
        let reg = state.registry.read().expect("registry lock");
        request
            .sliders
            .iter()
            .map(|s| {
                reg.get(&s.id).map(|a| (a, s.alpha)).ok_or_else(|| ApiError {
                    status: StatusCode::NOT_FOUND,
                    message: format!("unknown slider id `{}`", s.id),
                    field: Some("sliders".into()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    let model = state.model.clone();
    let response = tokio::task::spawn_blocking(move || render_request(&model, &sliders, &request))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("generation task failed: {e}"),
            field: None,
        })??;
    Ok(Json(response))
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

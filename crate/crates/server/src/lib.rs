//! HTTP service over a frozen checkpoint.
//!
//! | method | path          | body                | result            |
//! |--------|---------------|---------------------|-------------------|
//! | POST   | `/v1/session` | `{"image": b64png}` | `{"session", "width", "height"}` |
//! | POST   | `/v1/segment` | [`SegmentRequest`]  | [`SegmentResponse`] |
//! | GET    | `/v1/concepts`| none                | `{"concepts": [..]}` |
//!
//! A segment request names either an inline image or a session. Prompt
//! coordinates are normalized to `[0, 1]` with pixel centers at
//! `(x + 0.5) / width`. Example:
//!
//! ```json
//! {"session": "3fa1…", "prompts": [{"x": 0.25, "y": 0.25, "label": "box_tl"},
//!   {"x": 0.5, "y": 0.5, "label": "box_br"}], "want_caption": true, "topk": 3}
//! ```

pub mod session;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tap_core::inference::{SegmentOptions, TapModel};
use tap_core::raster::Rle;
use tap_core::sampler::{PointLabel, PromptKind, PromptPoint, PromptSet};

use session::{Entry, Lookup, SessionCache};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Largest accepted decoded image, in bytes of PNG.
    pub max_image_bytes: usize,
    /// Largest accepted image side, in pixels.
    pub max_image_side: u32,
    pub max_sessions: usize,
    pub session_ttl: Duration,
    pub max_topk: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_image_bytes: 8 << 20,
            max_image_side: 2048,
            max_sessions: 64,
            session_ttl: Duration::from_secs(600),
            max_topk: 64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<tap_core::Error> for ApiError {
    fn from(e: tap_core::Error) -> Self {
        match e {
            tap_core::Error::InvalidPrompt(m) => Self::BadRequest(m),
            other => Self::Internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WirePoint {
    pub x: f32,
    pub y: f32,
    pub label: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SegmentRequest {
    /// Base64 PNG.
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub prompts: Vec<WirePoint>,
    /// `box`, `points` or `sketch`; inferred from the labels when absent.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub want_caption: bool,
    #[serde(default = "default_topk")]
    pub topk: usize,
}

fn default_topk() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub name: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_ms: f64,
    pub decode_ms: f64,
    pub total_ms: f64,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub session: String,
    pub mask: Rle,
    pub slot: usize,
    pub iou_pred: [f32; 4],
    pub concepts: Vec<ConceptScore>,
    pub caption: Option<String>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRequest {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub concepts: Vec<String>,
}

pub struct AppState {
    model: TapModel,
    sessions: Mutex<SessionCache>,
    config: ServerConfig,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(model: TapModel, config: ServerConfig) -> SharedState {
        Arc::new(Self {
            sessions: Mutex::new(SessionCache::new(config.max_sessions, config.session_ttl)),
            model,
            config,
        })
    }
}

fn parse_label(s: &str) -> Result<PointLabel, ApiError> {
    match s {
        "pos" => Ok(PointLabel::Positive),
        "neg" => Ok(PointLabel::Negative),
        "box_tl" => Ok(PointLabel::BoxTopLeft),
        "box_br" => Ok(PointLabel::BoxBottomRight),
        other => Err(ApiError::BadRequest(format!("unknown label {other:?}"))),
    }
}

/// Wire prompts to a validated prompt set.
pub fn to_prompt_set(points: &[WirePoint], kind: Option<&str>) -> Result<PromptSet, ApiError> {
    if points.is_empty() {
        return Err(ApiError::Unprocessable("empty prompt set".into()));
    }
    let pts = points
        .iter()
        .map(|p| {
            Ok(PromptPoint {
                x: p.x,
                y: p.y,
                label: parse_label(&p.label)?,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    let kind = match kind {
        Some("box") => PromptKind::Box,
        Some("points") => PromptKind::Points,
        Some("sketch") => PromptKind::Sketch,
        Some(other) => return Err(ApiError::BadRequest(format!("unknown prompt kind {other:?}"))),
        None if pts.iter().all(|p| p.label.is_corner()) => PromptKind::Box,
        None => PromptKind::Points,
    };
    Ok(PromptSet::new(kind, pts)?)
}

fn decode_image(b64: &str, cfg: &ServerConfig) -> Result<image::RgbImage, ApiError> {
    if b64.len() / 4 * 3 > cfg.max_image_bytes + 3 {
        return Err(ApiError::TooLarge("image exceeds the byte limit".into()));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
    if bytes.len() > cfg.max_image_bytes {
        return Err(ApiError::TooLarge("image exceeds the byte limit".into()));
    }
    let reader = image::ImageReader::with_format(std::io::Cursor::new(&bytes), image::ImageFormat::Png);
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| ApiError::BadRequest(format!("image is not a PNG: {e}")))?;
    if w > cfg.max_image_side || h > cfg.max_image_side {
        return Err(ApiError::TooLarge(format!("image {w}x{h} exceeds {} pixels per side", cfg.max_image_side)));
    }
    if w == 0 || h == 0 {
        return Err(ApiError::BadRequest("image has no pixels".into()));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ApiError::BadRequest(format!("image is not a PNG: {e}")))?;
    Ok(img.to_rgb8())
}

fn content_id(image: &image::RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Encodes (or fetches) an image; returns its session id, entry and
/// whether the cache already held it.
fn ensure_session(state: &AppState, image: &image::RgbImage) -> Result<(String, Entry, bool), ApiError> {
    let id = content_id(image);
    if let Lookup::Hit(e) = state.sessions.lock().expect("session lock").get(&id, Instant::now()) {
        return Ok((id, e, true));
    }
    let grid = state.model.encode(image)?;
    let entry = Entry {
        grid,
        width: image.width() as usize,
        height: image.height() as usize,
    };
    state
        .sessions
        .lock()
        .expect("session lock")
        .insert(id.clone(), entry.clone(), Instant::now());
    Ok((id, entry, false))
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Synchronous request handling shared by the HTTP layer and tests.
pub fn segment(state: &AppState, req: &SegmentRequest) -> Result<SegmentResponse, ApiError> {
    let start = Instant::now();
    let prompts = to_prompt_set(&req.prompts, req.kind.as_deref())?;
    if req.topk == 0 || req.topk > state.config.max_topk {
        return Err(ApiError::BadRequest(format!("topk must lie in 1..={}", state.config.max_topk)));
    }
    if req.want_caption && !state.model.has_captioner() {
        return Err(ApiError::Unprocessable("checkpoint has no caption model".into()));
    }
    let (id, entry, hit) = match (&req.image, &req.session) {
        (Some(b64), _) => ensure_session(state, &decode_image(b64, &state.config)?)?,
        (None, Some(id)) => match state.sessions.lock().expect("session lock").get(id, Instant::now()) {
            Lookup::Hit(e) => (id.clone(), e, true),
            Lookup::Expired => return Err(ApiError::NotFound(format!("session {id} expired"))),
            Lookup::Missing => return Err(ApiError::NotFound(format!("unknown session {id}"))),
        },
        (None, None) => return Err(ApiError::BadRequest("request needs an image or a session".into())),
    };
    let encode_ms = ms(start);
    let t_dec = Instant::now();
    let opts = SegmentOptions {
        topk: req.topk,
        caption: req.want_caption,
    };
    let seg = state
        .model
        .segment(&entry.grid, std::slice::from_ref(&prompts), entry.width, entry.height, opts)?
        .pop()
        .ok_or_else(|| ApiError::Internal("decoder returned no result".into()))?;
    let names = state.model.concepts();
    Ok(SegmentResponse {
        session: id,
        mask: seg.mask.to_rle(),
        slot: seg.slot,
        iou_pred: seg.iou_pred,
        concepts: seg
            .concepts
            .iter()
            .map(|&(i, score)| ConceptScore {
                name: names[i].clone(),
                score,
            })
            .collect(),
        caption: seg.caption,
        timing: Timing {
            encode_ms,
            decode_ms: ms(t_dec),
            total_ms: ms(start),
            cache_hit: hit,
        },
    })
}

pub fn create_session(state: &AppState, req: &SessionRequest) -> Result<SessionResponse, ApiError> {
    let image = decode_image(&req.image, &state.config)?;
    let (session, entry, _) = ensure_session(state, &image)?;
    Ok(SessionResponse {
        session,
        width: entry.width,
        height: entry.height,
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn json_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request: {e}")))
}

async fn segment_handler(State(state): State<SharedState>, body: axum::body::Bytes) -> Result<Json<SegmentResponse>, ApiError> {
    let req: SegmentRequest = json_body(&body)?;
    Ok(Json(blocking(move || segment(&state, &req)).await?))
}

async fn session_handler(State(state): State<SharedState>, body: axum::body::Bytes) -> Result<Json<SessionResponse>, ApiError> {
    let req: SessionRequest = json_body(&body)?;
    Ok(Json(blocking(move || create_session(&state, &req)).await?))
}

async fn concepts_handler(State(state): State<SharedState>) -> Json<ConceptsResponse> {
    Json(ConceptsResponse {
        concepts: state.model.concepts().to_vec(),
    })
}

pub fn router(state: SharedState) -> Router {
    let limit = state.config.max_image_bytes / 3 * 4 + (1 << 16);
    Router::new()
        .route("/v1/segment", post(segment_handler))
        .route("/v1/session", post(session_handler))
        .route("/v1/concepts", get(concepts_handler))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

pub async fn serve(model: TapModel, addr: &str, config: ServerConfig) -> std::io::Result<()> {
    let state = AppState::new(model, config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local: SocketAddr = listener.local_addr()?;
    log::info!("listening on http://{local}");
    axum::serve(listener, router(state)).await
}

//! JSON-over-HTTP front end. Model inference runs on one dedicated worker
//! thread fed by a queue; retrieval reads immutable shared indexes.

pub mod api;
pub mod artifacts;

use std::net::SocketAddr;
use std::sync::{mpsc, Arc};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use tokio::sync::oneshot;

use api::*;
pub use artifacts::{Artifacts, IndexBundle, StyleCatalog};

use crate::data::components::{resample_patch, Category};
use crate::data::raster::{
    decode_gray_png, decode_labels_png, decode_rgb_png, decode_sketch_png, encode_gray_png, encode_labels_png,
    encode_rgb_png, encode_sketch_png,
};
use crate::data::{extract_sketch, ColorImage, LabelSchema, PoseTriplet, Segmenter};
use crate::error::Error;
use crate::model::{ConditionPair, ScModel, StyleCode};
use crate::retrieval::{rerank_by_strokes, retrieve_component, retrieve_global_by_pose, shadow_for};

pub const DEFAULT_K: usize = 20;
pub const MAX_K: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
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

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", m)
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", m)
    }

    pub fn unavailable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Dimension(_) => ApiError::unprocessable(e.to_string()),
            Error::Data(_) | Error::PngDecode(_) | Error::Retrieval(_) => ApiError::bad_request(e.to_string()),
            Error::State(_) => ApiError::unavailable(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// State owned by the inference worker.
struct Worker {
    model: Option<ScModel>,
    segmenter: Option<Segmenter>,
    styles: Arc<Vec<(String, StyleCode)>>,
}

type Job = Box<dyn FnOnce(&mut Worker) + Send>;

/// Handle to the single inference thread; jobs run in submission order.
#[derive(Clone)]
pub struct ModelHandle {
    tx: mpsc::Sender<Job>,
}

impl ModelHandle {
    fn spawn(mut worker: Worker) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        std::thread::Builder::new()
            .name("sketchstyle-model".into())
            .spawn(move || {
                for job in rx {
                    job(&mut worker);
                }
            })
            .expect("spawn model worker");
        Self { tx }
    }

    async fn run<T: Send + 'static>(&self, f: impl FnOnce(&mut Worker) -> T + Send + 'static) -> Result<T, ApiError> {
        let (tx, rx) = oneshot::channel();
        self.tx
            .send(Box::new(move |w| {
                let _ = tx.send(f(w));
            }))
            .map_err(|_| ApiError::unavailable("model worker stopped"))?;
        rx.await.map_err(|_| ApiError::internal("model worker dropped the request"))
    }
}

struct Shared {
    schema: LabelSchema,
    condition_res: Option<usize>,
    low_shape: Option<(usize, usize)>,
    model_loaded: bool,
    catalog: Vec<StyleSummary>,
    styles: Arc<Vec<(String, StyleCode)>>,
    global: Option<IndexBundle>,
    components: std::collections::BTreeMap<Category, IndexBundle>,
}

#[derive(Clone)]
pub struct AppState {
    model: ModelHandle,
    shared: Arc<Shared>,
}

fn b64_png(bytes: Vec<u8>) -> String {
    B64.encode(bytes)
}

fn unb64(field: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim())
        .map_err(|e| ApiError::bad_request(format!("{field} is not valid base64: {e}")))
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn png_err(field: &str) -> impl Fn(Error) -> ApiError + '_ {
    move |e| ApiError::bad_request(format!("{field}: {e}"))
}

impl AppState {
    /// Starts the worker and renders the style thumbnails.
    pub fn new(artifacts: Artifacts) -> crate::Result<Self> {
        let schema = LabelSchema::desk();
        let styles = Arc::new(artifacts.styles);
        let (condition_res, low_shape, catalog) = match &artifacts.model {
            Some(m) => {
                let g = m.generator_config();
                for (id, s) in styles.iter() {
                    if s.rows() != g.total_styles() || s.dim() != g.style_dim {
                        return Err(Error::Config(format!("catalog style {id} does not fit the generator")));
                    }
                }
                let mut catalog = Vec::with_capacity(styles.len());
                for (id, s) in styles.iter() {
                    let s = s.clone().with_split(g.high_style_count())?;
                    let (img, _) = m.generator.synthesize_unconditional(&[&s], false)?;
                    catalog.push(StyleSummary {
                        id: id.clone(),
                        thumbnail_png: b64_png(encode_rgb_png(&ColorImage::from_tensor(&img)?)?),
                    });
                }
                (
                    Some(m.encoder.config().condition_res),
                    Some((g.low_style_count(), g.style_dim)),
                    catalog,
                )
            }
            None => (None, None, Vec::new()),
        };
        let shared = Shared {
            schema,
            condition_res,
            low_shape,
            model_loaded: artifacts.model.is_some(),
            catalog,
            styles: styles.clone(),
            global: artifacts.global,
            components: artifacts.components,
        };
        let model = ModelHandle::spawn(Worker {
            model: artifacts.model,
            segmenter: artifacts.segmenter,
            styles,
        });
        Ok(Self {
            model,
            shared: Arc::new(shared),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/retrieve/global", post(retrieve_global))
        .route("/retrieve/component", post(retrieve_component_h))
        .route("/extract", post(extract))
        .route("/styles", get(styles))
        .route("/health", get(health))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed")
        })
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

enum StyleChoice {
    Catalog(usize),
    Rows(Vec<f32>),
}

async fn generate(State(s): State<AppState>, body: Bytes) -> ApiResult<GenerateResponse> {
    let req: GenerateRequest = parse(&body)?;
    let sh = &s.shared;
    let (Some(res), Some((l_low, d))) = (sh.condition_res, sh.low_shape) else {
        return Err(ApiError::unavailable("no model loaded"));
    };
    let (sketch, sres) = decode_sketch_png(&unb64("sketch_png", &req.sketch_png)?).map_err(png_err("sketch_png"))?;
    let (labels, lres) =
        decode_labels_png(&unb64("labels_png", &req.labels_png)?, &sh.schema).map_err(png_err("labels_png"))?;
    if sres != res || lres != res {
        return Err(ApiError::unprocessable(format!(
            "rasters are {sres}² and {lres}², the model expects {res}²"
        )));
    }
    let style = match req.style_ref {
        None if sh.styles.is_empty() => return Err(ApiError::unprocessable("no style_ref and an empty catalog")),
        None => StyleChoice::Catalog(0),
        Some(StyleRef::Id(id)) => StyleChoice::Catalog(
            sh.styles
                .iter()
                .position(|(i, _)| *i == id)
                .ok_or_else(|| ApiError::unprocessable(format!("unknown style id {id}")))?,
        ),
        Some(StyleRef::Rows(rows)) => {
            if rows.len() != l_low || rows.iter().any(|r| r.len() != d) {
                return Err(ApiError::unprocessable(format!("style rows must be {l_low}×{d}")));
            }
            let flat: Vec<f32> = rows.into_iter().flatten().collect();
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::unprocessable("style rows must be finite"));
            }
            StyleChoice::Rows(flat)
        }
    };
    let cond = ConditionPair::new(res, sketch, labels)?;
    let png = s
        .model
        .run(move |w| -> crate::Result<Vec<u8>> {
            let m = w.model.as_ref().ok_or_else(|| Error::State("no model loaded".into()))?;
            let low = match style {
                StyleChoice::Catalog(i) => w.styles[i].1.clone().with_split(m.generator_config().high_style_count())?,
                StyleChoice::Rows(v) => StyleCode::new(v, l_low, d, 0)?,
            };
            let img = m.synthesize_conditional(&cond, &low)?;
            encode_rgb_png(&ColorImage::from_tensor(&img)?)
        })
        .await??;
    Ok(Json(GenerateResponse { image_png: b64_png(png) }))
}

fn check_k(k: Option<usize>) -> Result<usize, ApiError> {
    match k.unwrap_or(DEFAULT_K) {
        0 => Err(ApiError::bad_request("k must be >= 1")),
        k if k > MAX_K => Err(ApiError::bad_request(format!("k must be <= {MAX_K}"))),
        k => Ok(k),
    }
}

fn check_pose(p: &PoseTriplet) -> Result<(), ApiError> {
    let ok = |v: f32| v.is_finite() && v.abs() <= PoseTriplet::RANGE;
    if ok(p.yaw) && ok(p.pitch) && ok(p.roll) {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!(
            "pose angles must be finite and within ±{} degrees",
            PoseTriplet::RANGE
        )))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("retrieval task failed: {e}")))?
}

async fn retrieve_global(State(s): State<AppState>, body: Bytes) -> ApiResult<GlobalResponse> {
    let req: GlobalRequest = parse(&body)?;
    check_pose(&req.pose)?;
    let k = check_k(req.k)?;
    let strokes = match &req.strokes_png {
        Some(p) => Some(decode_gray_png(&unb64("strokes_png", p)?).map_err(png_err("strokes_png"))?),
        None => None,
    };
    let shared = s.shared.clone();
    let out = blocking(move || {
        let g = shared.global.as_ref().ok_or_else(|| ApiError::unavailable("no global index loaded"))?;
        let mut ids = retrieve_global_by_pose(&g.index, req.pose, k)?;
        if let Some((v, w, h)) = strokes {
            let size = g.embedder.config().input_size;
            let q = if w == size && h == size { v } else { resample_patch(&v, w, h, size) };
            ids = rerank_by_strokes(&ids, &q, &g.embedder, &g.index)?;
        }
        let shadow = shadow_for(&g.index, &ids)?;
        let r = g.index.preview_res().expect("shadow implies previews");
        Ok(GlobalResponse {
            shadow_png: b64_png(encode_gray_png(&shadow, r, r)?),
            candidate_ids: ids,
        })
    })
    .await?;
    Ok(Json(out))
}

async fn retrieve_component_h(State(s): State<AppState>, body: Bytes) -> ApiResult<ComponentResponse> {
    let req: ComponentRequest = parse(&body)?;
    let cat = Category::parse(&req.category)
        .ok_or_else(|| ApiError::bad_request(format!("unknown category {:?}", req.category)))?;
    let k = check_k(req.k)?;
    let (v, w, h) = decode_gray_png(&unb64("patch_png", &req.patch_png)?).map_err(png_err("patch_png"))?;
    let shared = s.shared.clone();
    let out = blocking(move || {
        let b = shared
            .components
            .get(&cat)
            .ok_or_else(|| ApiError::unavailable(format!("no index loaded for {}", cat.name())))?;
        let size = b.embedder.config().input_size;
        let q = if w == size && h == size { v } else { resample_patch(&v, w, h, size) };
        let ids = retrieve_component(&b.index, &b.embedder, &q, k)?;
        let candidates = ids
            .into_iter()
            .map(|id| {
                let row = b.index.row_of(&id).expect("retrieved ids exist");
                let patch_png = match (b.index.preview(row), b.index.preview_res()) {
                    (Some(p), Some(r)) => b64_png(encode_gray_png(&p, r, r)?),
                    _ => String::new(),
                };
                Ok(ComponentCandidate {
                    rect: b.index.entries()[row].rect,
                    id,
                    patch_png,
                })
            })
            .collect::<Result<_, ApiError>>()?;
        Ok(ComponentResponse { candidates })
    })
    .await?;
    Ok(Json(out))
}

async fn extract(State(s): State<AppState>, body: Bytes) -> ApiResult<ExtractResponse> {
    let req: ExtractRequest = parse(&body)?;
    let img = decode_rgb_png(&unb64("image_png", &req.image_png)?).map_err(png_err("image_png"))?;
    let shared = s.shared.clone();
    let out = s
        .model
        .run(move |w| -> Result<ExtractResponse, ApiError> {
            let seg = w
                .segmenter
                .as_ref()
                .ok_or_else(|| ApiError::unavailable("no segmenter loaded"))?;
            let sketch = extract_sketch(&img);
            let labels = crate::data::extract_labels(&img, seg)?;
            Ok(ExtractResponse {
                sketch_png: b64_png(encode_sketch_png(&sketch, img.res)?),
                labels_png: b64_png(encode_labels_png(&labels, img.res, &shared.schema)?),
            })
        })
        .await??;
    Ok(Json(out))
}

async fn styles(State(s): State<AppState>) -> Json<StylesResponse> {
    Json(StylesResponse {
        default: s.shared.catalog.first().map(|c| c.id.clone()),
        styles: s.shared.catalog.clone(),
    })
}

async fn health(State(s): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        model_loaded: s.shared.model_loaded,
        index_loaded: s.shared.global.is_some() || !s.shared.components.is_empty(),
    })
}

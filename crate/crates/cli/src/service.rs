//! HTTP API over the shared pipeline. Requests never mutate a stored bundle; the only shared
//! state is the write-once store and the engine's analysis cache.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use recolor_core::color::{ColorTerm, Rgb8};
use recolor_core::design::{decode_png_rgb, DesignBundle, ElementClass, Mask, Rect};
use recolor_core::instruction::parse_instruction;
use recolor_core::pipeline::{bundle_with_photo, Engine, PipelineError, Stage};
use recolor_core::predict::PredictConfig;
use serde::{Deserialize, Serialize};

use crate::render::{render_outcome, RecolorManifest};
use crate::store::{ResultRecord, Store, StoreError};

/// Largest accepted request body.
pub const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub engine: Arc<Engine>,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl ToString) -> Self {
        ApiError(
            status,
            ErrorBody {
                status: status.as_u16(),
                code: code.to_string(),
                message: message.to_string(),
                stage: None,
                suggestion: None,
            },
        )
    }

    fn bad_request(code: &str, message: impl ToString) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(code: &str, message: impl ToString) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let mut a = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &e.code, &e.message);
        a.1.stage = Some(e.stage);
        a.1.suggestion = e.suggestion;
        a
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::DesignNotFound(_) => ApiError::not_found("unknown-design", &e),
            StoreError::InvalidId(_) => ApiError::bad_request("invalid-id", &e),
            StoreError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "store-conflict", &e),
            StoreError::Bundle(b) => ApiError::bad_request(b.code(), &e),
            StoreError::Io { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store-io", &e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/designs", post(upload_design))
        .route("/api/designs/{id}", get(get_design))
        .route("/api/recolor", post(recolor))
        .route("/api/iterate", post(iterate))
        .route("/api/assets/{asset_ref}", get(get_asset))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ElementView {
    pub id: String,
    pub class: ElementClass,
    pub color: Option<Rgb8>,
    pub hex: Option<String>,
    pub pixels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhotoObjectView {
    pub phrase: String,
    pub color: ColorTerm,
    pub pixels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DesignView {
    pub id: String,
    pub created: bool,
    pub width: u32,
    pub height: u32,
    pub photo_rect: Rect,
    pub design_ref: String,
    pub photo_ref: String,
    pub elements: Vec<ElementView>,
    pub photo_objects: Vec<PhotoObjectView>,
}

fn design_view(id: String, created: bool, design_ref: String, photo_ref: String, b: &DesignBundle) -> DesignView {
    DesignView {
        id,
        created,
        width: b.design.width(),
        height: b.design.height(),
        photo_rect: b.photo_rect,
        design_ref,
        photo_ref,
        elements: b
            .elements
            .iter()
            .map(|e| ElementView {
                id: e.id.clone(),
                class: e.class,
                color: e.color,
                hex: e.color.map(Rgb8::hex),
                pixels: e.mask.count(),
            })
            .collect(),
        photo_objects: b
            .photo_objects
            .iter()
            .map(|o| PhotoObjectView {
                phrase: o.phrase.clone(),
                color: o.color,
                pixels: o.mask.count(),
            })
            .collect(),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker-failed", e))?
}

/// Multipart fields: `design` (PNG), `photo` (PNG), `annotations` (JSON), optional `id`.
async fn upload_design(State(st): State<AppState>, mut mp: Multipart) -> ApiResult<Response> {
    let (mut design, mut photo, mut ann, mut id) = (None, None, None, None);
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("malformed-multipart", e))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request("malformed-multipart", e))?;
        match name.as_str() {
            "design" => design = Some(data),
            "photo" => photo = Some(data),
            "annotations" => ann = Some(data),
            "id" => id = Some(String::from_utf8_lossy(&data).trim().to_string()),
            other => return Err(ApiError::bad_request("unknown-field", format!("unexpected field '{other}'"))),
        }
    }
    let missing = |f: &str| ApiError::bad_request("missing-field", format!("multipart field '{f}' is required"));
    let design = design.ok_or_else(|| missing("design"))?;
    let photo = photo.ok_or_else(|| missing("photo"))?;
    let ann = ann.ok_or_else(|| missing("annotations"))?;
    blocking(move || {
        let design = decode_png_rgb(&design).map_err(|e| ApiError::bad_request("invalid-image", format!("design: {e}")))?;
        let photo = decode_png_rgb(&photo).map_err(|e| ApiError::bad_request("invalid-image", format!("photo: {e}")))?;
        let ann = std::str::from_utf8(&ann).map_err(|e| ApiError::bad_request("invalid-annotations", e))?;
        let b = DesignBundle::from_parts(design, photo, ann).map_err(|e| ApiError::bad_request(e.code(), e))?;
        let (rec, created) = st.store.put_design(id.as_deref(), &b)?;
        let status = if created { StatusCode::CREATED } else { StatusCode::OK };
        let view = design_view(rec.id, created, rec.design_ref, rec.photo_ref, &b);
        Ok((status, Json(view)).into_response())
    })
    .await
}

async fn get_design(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<DesignView>> {
    blocking(move || {
        let rec = st.store.design_record(&id)?;
        let b = st.store.load_design(&id)?;
        Ok(Json(design_view(rec.id, false, rec.design_ref, rec.photo_ref, &b)))
    })
    .await
}

async fn get_asset(State(st): State<AppState>, Path(asset_ref): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        st.store
            .asset(&asset_ref)?
            .ok_or_else(|| ApiError::not_found("unknown-asset", format!("asset '{asset_ref}' not found")))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecolorRequest {
    pub design_id: String,
    pub instruction: String,
    pub threshold: Option<f64>,
    /// Base64 PNG the size of the photo; nonzero pixels are inside the region.
    pub mask: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterateRequest {
    pub design_id: String,
    pub result_ref: String,
    pub instruction: String,
    pub threshold: Option<f64>,
    pub mask: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RecolorResponse {
    pub design_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_result_ref: Option<String>,
    #[serde(flatten)]
    pub manifest: RecolorManifest,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed-request", e))
}

fn decode_mask(b64: &str) -> ApiResult<Mask> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request("invalid-mask", e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ApiError::bad_request("invalid-mask", e))?;
    Ok(Mask::from_gray(&img.to_luma8()))
}

fn threshold_config(engine: &Engine, t: Option<f64>) -> ApiResult<PredictConfig> {
    let mut cfg = engine.config.predict.clone();
    if let Some(t) = t {
        if !(0.0..=1.0).contains(&t) {
            return Err(ApiError::bad_request("invalid-threshold", "threshold must lie in [0, 1]"));
        }
        cfg.threshold = t;
    }
    Ok(cfg)
}

/// Runs one instruction on `b` and stores every raster it produces.
fn run_and_store(
    st: &AppState,
    design_id: &str,
    b: &DesignBundle,
    instruction: &str,
    threshold: Option<f64>,
    mask: Option<&str>,
) -> ApiResult<RecolorManifest> {
    let predict = threshold_config(&st.engine, threshold)?;
    let mask = mask.map(decode_mask).transpose()?;
    let ast = parse_instruction(instruction).map_err(PipelineError::from)?;
    let outcome = st
        .engine
        .recolor_ast_with(b, instruction, ast, mask.as_ref(), &predict)?;
    let manifest = render_outcome(&outcome, predict.threshold, |_, bytes| st.store.put_asset(&bytes))?;
    for r in &manifest.results {
        st.store.put_result(
            &r.image_ref,
            &ResultRecord {
                design_id: design_id.to_string(),
                photo_ref: r.photo_ref.clone(),
            },
        )?;
    }
    Ok(manifest)
}

async fn recolor(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<RecolorResponse>> {
    let req: RecolorRequest = parse_json(&body)?;
    blocking(move || {
        let b = st.store.load_design(&req.design_id)?;
        let manifest = run_and_store(&st, &req.design_id, &b, &req.instruction, req.threshold, req.mask.as_deref())?;
        Ok(Json(RecolorResponse {
            design_id: req.design_id,
            base_result_ref: None,
            manifest,
        }))
    })
    .await
}

async fn iterate(State(st): State<AppState>, body: Bytes) -> ApiResult<Json<RecolorResponse>> {
    let req: IterateRequest = parse_json(&body)?;
    blocking(move || {
        let b = st.store.load_design(&req.design_id)?;
        let unknown = || ApiError::not_found("unknown-result", format!("result '{}' not found for this design", req.result_ref));
        let rec = st.store.result(&req.result_ref)?.ok_or_else(unknown)?;
        if rec.design_id != req.design_id {
            return Err(unknown());
        }
        let bytes = st.store.asset(&rec.photo_ref)?.ok_or_else(unknown)?;
        let photo = decode_png_rgb(&bytes).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store-io", e))?;
        let base = bundle_with_photo(&b, photo);
        let manifest = run_and_store(&st, &req.design_id, &base, &req.instruction, req.threshold, req.mask.as_deref())?;
        Ok(Json(RecolorResponse {
            design_id: req.design_id,
            base_result_ref: Some(req.result_ref),
            manifest,
        }))
    })
    .await
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

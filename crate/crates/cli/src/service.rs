//! Local HTTP service. Requests are accepted concurrently and executed in
//! arrival order by one worker thread that owns the models; when the queue
//! is full the service answers 503.
//!
//! Images travel as base64 PNG. Semantic maps are 8-bit group codes, face
//! channels are binary {0, 255}. Boxes are `[x, y, width, height]`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::{GrayImage, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use incontext::egn::{build_egn_input, generate_pose, BBoxMode, EgnVariant};
use incontext::mcrn::replace_component;
use incontext::pipeline::{insert_person, refine_composite, render_into, InsertionRequest, Models};
use incontext::raster::BBox;
use incontext::semantic::io::{gray_from_png, gray_to_png, rgb_from_png, rgb_to_png};
use incontext::semantic::{FaceChannel, Keypoints, Part, PersonParse, PersonPose, SceneParse, SemanticMap};
use incontext::tensor::{mask_to_gray, unit_to_rgb};
use incontext::Error;

pub const DEFAULT_QUEUE_DEPTH: usize = 8;

/// Structured error body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
        }
    }

    fn invalid(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Machine-readable name of an error variant.
pub fn error_code(e: &Error) -> &'static str {
    match e {
        Error::UnknownLabel(_) => "unknown_label",
        Error::NotAPaletteCode { .. } => "not_a_palette_code",
        Error::NotBinary { .. } => "not_binary",
        Error::EmptyPerson => "empty_person",
        Error::DegenerateTarget => "degenerate_target",
        Error::PartMissing(_) => "part_missing",
        Error::Shape(_) => "shape_mismatch",
        Error::SpatialTooSmall { .. } => "spatial_too_small",
        Error::ResolutionMismatch { .. } => "resolution_mismatch",
        Error::MaskOutOfRange(_) => "mask_out_of_range",
        Error::NoFace => "no_face",
        Error::BoxOutOfFrame(..) => "box_out_of_frame",
        Error::DescriptorDim { .. } => "descriptor_dim",
        Error::EmptyGeneration { .. } => "empty_generation",
        Error::ChannelMismatch { .. } => "channel_mismatch",
        Error::SampleRejected(_) => "sample_rejected",
        Error::Config(_) => "invalid_request",
        Error::Image(_) => "invalid_image",
        Error::Json(_) => "invalid_json",
        Error::BackendMissing(_) | Error::Checkpoint(_) => "model_unavailable",
        _ => "internal",
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = error_code(&e);
        let status = match code {
            "internal" => StatusCode::INTERNAL_SERVER_ERROR,
            "model_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn decode_b64(field: &str, data: &str) -> ApiResult<Vec<u8>> {
    STANDARD
        .decode(data)
        .map_err(|e| ApiError::invalid("invalid_base64", format!("{field}: {e}")))
}

fn gray_field(field: &str, data: &str) -> ApiResult<GrayImage> {
    gray_from_png(&decode_b64(field, data)?).map_err(|e| ApiError::invalid("invalid_image", format!("{field}: {e}")))
}

fn rgb_field(field: &str, data: &str) -> ApiResult<RgbImage> {
    rgb_from_png(&decode_b64(field, data)?).map_err(|e| ApiError::invalid("invalid_image", format!("{field}: {e}")))
}

fn semantic_field(field: &str, data: &str) -> ApiResult<SemanticMap> {
    SemanticMap::new(gray_field(field, data)?).map_err(ApiError::from)
}

fn face_field(field: &str, data: &str) -> ApiResult<FaceChannel> {
    FaceChannel::new(gray_field(field, data)?).map_err(ApiError::from)
}

fn encode_gray(img: &GrayImage) -> ApiResult<String> {
    Ok(STANDARD.encode(gray_to_png(img)?))
}

fn encode_rgb(img: &RgbImage) -> ApiResult<String> {
    Ok(STANDARD.encode(rgb_to_png(img)?))
}

fn parse_box(b: [u32; 4], width: u32, height: u32) -> ApiResult<BBox> {
    let [x, y, w, h] = b;
    if w == 0 || h == 0 {
        return Err(ApiError::invalid("invalid_request", "box width and height must be positive"));
    }
    let bb = BBox::new(x, y, x + w - 1, y + h - 1);
    if !bb.fits(width, height) {
        return Err(Error::BoxOutOfFrame(bb.as_array(), width, height).into());
    }
    Ok(bb)
}

fn box_wire(b: BBox) -> [u32; 4] {
    [b.x_min, b.y_min, b.width(), b.height()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseWire {
    pub semantic: String,
    pub face: String,
}

impl PoseWire {
    fn encode(p: &PersonPose) -> ApiResult<Self> {
        Ok(Self {
            semantic: encode_gray(p.semantic.pixels())?,
            face: encode_gray(p.face.pixels())?,
        })
    }

    fn decode(&self, field: &str) -> ApiResult<PersonPose> {
        let s = semantic_field(&format!("{field}.semantic"), &self.semantic)?;
        let f = face_field(&format!("{field}.face"), &self.face)?;
        PersonPose::new(s, f).map_err(ApiError::from)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonWire {
    pub image: String,
    /// Group-code parse, same size as `image`.
    pub parse: String,
    #[serde(default)]
    pub keypoints: Option<Vec<[f32; 2]>>,
}

struct Person {
    image: RgbImage,
    parse: SemanticMap,
    keypoints: Option<Keypoints>,
}

impl PersonWire {
    fn decode(&self, field: &str) -> ApiResult<Person> {
        let image = rgb_field(&format!("{field}.image"), &self.image)?;
        let parse = semantic_field(&format!("{field}.parse"), &self.parse)?;
        if parse.dimensions() != image.dimensions() {
            return Err(Error::Shape(format!("{field}: parse {:?} vs image {:?}", parse.dimensions(), image.dimensions())).into());
        }
        Ok(Person {
            image,
            parse,
            keypoints: self.keypoints.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRequest {
    pub semantic: String,
    pub face: String,
    #[serde(default)]
    pub bbox: Option<[u32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseResponse {
    pub p: PoseWire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorWire {
    pub image: String,
    pub parse: String,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub p: PoseWire,
    pub target: PersonWire,
    /// Parts taken from another person instead of the target.
    #[serde(default)]
    pub donor: Option<DonorWire>,
    /// Scene to composite over; `o` is returned when present.
    #[serde(default)]
    pub scene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub z: String,
    pub m: String,
    pub o: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineRequest {
    pub o: String,
    pub face: String,
    pub target: PersonWire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResponse {
    pub w: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePersonWire {
    pub parse: String,
    #[serde(default)]
    pub keypoints: Option<Vec<[f32; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWire {
    pub image: String,
    pub persons: Vec<ScenePersonWire>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertRequest {
    pub scene: SceneWire,
    pub target: PersonWire,
    #[serde(default)]
    pub bbox: Option<[u32; 4]>,
    /// `egn` (box-conditioned, the default) or `egn-prime`.
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub skip_frn: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertResponse {
    pub p: PoseWire,
    pub z: String,
    pub m: String,
    pub o: String,
    pub w: String,
    pub bbox: Option<[u32; 4]>,
    pub attempts: usize,
    pub frn_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub queue_depth: usize,
    pub egn: bool,
    pub egn_prime: bool,
    pub frn: bool,
    pub mcrn_resolution: u32,
}

type Job = Box<dyn FnOnce(&Models) + Send>;

#[derive(Clone)]
struct AppState {
    jobs: mpsc::Sender<Job>,
    health: Arc<Health>,
}

/// The worker side of the service; owns the models.
pub struct Worker {
    models: Models,
    jobs: mpsc::Receiver<Job>,
}

impl Worker {
    /// Runs queued jobs on a dedicated thread until the router is dropped.
    pub fn spawn(self) -> std::thread::JoinHandle<()> {
        let Worker { models, mut jobs } = self;
        std::thread::spawn(move || {
            while let Some(job) = jobs.blocking_recv() {
                job(&models);
            }
        })
    }
}

/// Router and its not-yet-started worker.
pub fn build(models: Models, queue_depth: usize) -> (Router, Worker) {
    let (tx, rx) = mpsc::channel(queue_depth.max(1));
    let health = Health {
        status: "ok".into(),
        queue_depth: queue_depth.max(1),
        egn: models.egn.is_some(),
        egn_prime: models.egn_prime.is_some(),
        frn: models.frn.is_some(),
        mcrn_resolution: models.mcrn.resolution(),
    };
    let state = AppState {
        jobs: tx,
        health: Arc::new(health),
    };
    let router = Router::new()
        .route("/health", get(health_handler))
        .route("/pose", post(pose_handler))
        .route("/render", post(render_handler))
        .route("/refine", post(refine_handler))
        .route("/insert", post(insert_handler))
        .with_state(state);
    (router, Worker { models, jobs: rx })
}

/// Router with its worker running.
pub fn router(models: Models, queue_depth: usize) -> Router {
    let (r, w) = build(models, queue_depth);
    w.spawn();
    r
}

pub async fn serve(models: Models, port: u16, queue_depth: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(models, queue_depth)).await?;
    Ok(())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("invalid_json", e.to_string()))
}

async fn run<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Models) -> ApiResult<T> + Send + 'static,
{
    let (tx, rx) = oneshot::channel();
    let job: Job = Box::new(move |m| {
        let _ = tx.send(f(m));
    });
    state.jobs.try_send(job).map_err(|e| match e {
        mpsc::error::TrySendError::Full(_) => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", "job queue is full"),
        mpsc::error::TrySendError::Closed(_) => {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker_stopped", "worker is not running")
        }
    })?;
    rx.await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "worker dropped the job"))?
}

async fn health_handler(State(state): State<AppState>) -> Json<Health> {
    Json((*state.health).clone())
}

async fn pose_handler(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<PoseResponse>> {
    let req: PoseRequest = parse_body(&body)?;
    let semantic = semantic_field("semantic", &req.semantic)?;
    let face = face_field("face", &req.face)?;
    let (w, h) = semantic.dimensions();
    if face.pixels().dimensions() != (w, h) {
        return Err(Error::Shape("semantic and face sizes differ".into()).into());
    }
    let bbox = req.bbox.map(|b| parse_box(b, w, h)).transpose()?;
    let scene = SceneParse {
        semantic,
        face,
        bbox: None,
        persons: Vec::new(),
    };
    let p = run(&state, move |models| {
        let (variant, mode) = match bbox {
            Some(b) => (EgnVariant::WithBbox, BBoxMode::InferenceSampled(b)),
            None => (EgnVariant::WithoutBbox, BBoxMode::None),
        };
        let egn = models.pose_model(variant)?;
        let input = build_egn_input(&scene, "request", None, mode, egn.config.resolution)?;
        Ok(generate_pose(egn, &input)?.resize(w, h))
    })
    .await?;
    Ok(Json(PoseResponse { p: PoseWire::encode(&p)? }))
}

async fn render_handler(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<RenderResponse>> {
    let req: RenderRequest = parse_body(&body)?;
    let pose = req.p.decode("p")?;
    let target = req.target.decode("target")?;
    let donor = match &req.donor {
        Some(d) => Some((
            rgb_field("donor.image", &d.image)?,
            semantic_field("donor.parse", &d.parse)?,
            d.parts.clone(),
        )),
        None => None,
    };
    let scene = match &req.scene {
        Some(s) => rgb_field("scene", s)?,
        None => {
            let (w, h) = pose.dimensions();
            RgbImage::new(w, h)
        }
    };
    let with_scene = req.scene.is_some();
    let (z, m, o) = run(&state, move |models| {
        let t = match &donor {
            Some((img, parse, parts)) => replace_component(&target.image, &target.parse, img, parse, parts)?,
            None => replace_component(&target.image, &target.parse, &target.image, &target.parse, &[])?,
        };
        Ok(render_into(&models.mcrn, &t, &pose, &scene)?)
    })
    .await?;
    Ok(Json(RenderResponse {
        z: encode_rgb(&unit_to_rgb(&z)?)?,
        m: encode_gray(&mask_to_gray(&m))?,
        o: if with_scene { Some(encode_rgb(&unit_to_rgb(&o)?)?) } else { None },
    }))
}

async fn refine_handler(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<RefineResponse>> {
    let req: RefineRequest = parse_body(&body)?;
    let o = rgb_field("o", &req.o)?;
    let face = face_field("face", &req.face)?;
    if face.pixels().dimensions() != o.dimensions() {
        return Err(Error::Shape("face channel and composite sizes differ".into()).into());
    }
    let target = req.target.decode("target")?;
    let kp = target
        .keypoints
        .clone()
        .ok_or_else(|| ApiError::invalid("no_face", "target keypoints are required"))?;
    let w = run(&state, move |models| {
        let x = incontext::tensor::rgb_to_unit(&o);
        Ok(refine_composite(models, &x, &face, &target.image, &kp)?)
    })
    .await?;
    Ok(Json(RefineResponse {
        w: encode_rgb(&unit_to_rgb(&w)?)?,
    }))
}

async fn insert_handler(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<InsertResponse>> {
    let req: InsertRequest = parse_body(&body)?;
    let scene_image = rgb_field("scene.image", &req.scene.image)?;
    let (w, h) = scene_image.dimensions();
    let persons = req
        .scene
        .persons
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let map = semantic_field(&format!("scene.persons[{i}].parse"), &p.parse)?;
            Ok(PersonParse::new(map, p.keypoints.clone()))
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let scene = SceneParse::compose(w, h, persons)?;
    let target = req.target.decode("target")?;
    let variant = match req.variant.as_deref() {
        None | Some("egn") => EgnVariant::WithBbox,
        Some("egn-prime") | Some("egn_prime") => EgnVariant::WithoutBbox,
        Some(v) => return Err(ApiError::invalid("invalid_request", format!("unknown variant {v:?}"))),
    };
    let bbox = req.bbox.map(|b| parse_box(b, w, h)).transpose()?;
    let request = InsertionRequest {
        scene_image,
        scene,
        target_image: target.image,
        target_parse: target.parse,
        target_keypoints: target.keypoints,
        bbox,
        variant,
        skip_frn: req.skip_frn,
        seed: req.seed,
    };
    let r = run(&state, move |models| Ok(insert_person(models, &request)?)).await?;
    Ok(Json(InsertResponse {
        p: PoseWire::encode(&r.p)?,
        z: encode_rgb(&unit_to_rgb(&r.z)?)?,
        m: encode_gray(&mask_to_gray(&r.m))?,
        o: encode_rgb(&unit_to_rgb(&r.o)?)?,
        w: encode_rgb(&r.w_image)?,
        bbox: r.bbox.map(box_wire),
        attempts: r.attempts,
        frn_applied: r.frn_applied,
    }))
}

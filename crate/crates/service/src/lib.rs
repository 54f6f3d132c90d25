//! HTTP API for annotating target images by hand.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/images/{id}` | PNG render of a target-train image |
//! | GET | `/api/images/{id}/proposals?stage=k` | [`ProposalBatch`] |
//! | POST | `/api/annotations` | [`AnnotationRequest`] → [`AnnotationResponse`] |
//! | POST | `/api/stage/advance` | retrain, evaluate and propose the next stage in the background |
//! | GET | `/api/status` | [`Status`] |
//!
//! Errors are `{"code": ..., "message": ...}` with a matching status code.

mod rle;
mod session;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use adaseg_core::data::{Dataset, PaletteEntry};
use adaseg_core::netpbm;
use adaseg_core::selection::ImageSelection;
use adaseg_core::{Strategy, Tensor};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

pub use rle::MaskRle;
pub use session::{AnnotationRequest, AnnotationResponse, LabelIn, Session, SessionError};

pub const DEFAULT_PORT: u16 = 8321;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError(
            status,
            ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        )
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "stage_running", "a stage is already running")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotFound(m) => ApiError::not_found(m),
            SessionError::BadRequest(m) => ApiError::bad_request(m),
            SessionError::Core(e) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

/// Pixels proposed to the annotator for one image and stage. Mask-based
/// strategies send `mask`, point-based ones `points`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalBatch {
    pub image_id: String,
    pub stage: usize,
    pub strategy: Strategy,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[u32; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskRle>,
    pub palette: Vec<PaletteEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouPoint {
    pub stage: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetStatus {
    pub total_annotated: usize,
    pub total_pixels: usize,
    pub annotated_fraction: f64,
    /// Pixels proposed for the open stage.
    pub proposed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub stage: usize,
    pub strategy: Strategy,
    pub running: bool,
    /// Stage 0 is the pretrained model.
    pub miou_history: Vec<MiouPoint>,
    pub budget: BudgetStatus,
    pub last_error: Option<String>,
}

/// Read-side copy of the session, refreshed after every write so readers
/// never wait for a running stage.
struct View {
    stage: usize,
    strategy: Strategy,
    proposals: BTreeMap<usize, BTreeMap<String, ImageSelection>>,
    history: Vec<MiouPoint>,
    total_annotated: usize,
    last_error: Option<String>,
}

pub struct AppState {
    session: Arc<Mutex<Session>>,
    running: AtomicBool,
    view: RwLock<View>,
    data: Arc<Dataset>,
}

impl AppState {
    pub fn new(session: Session) -> Arc<Self> {
        let exp = session.experiment();
        let data = exp.data().clone();
        let mut history = Vec::new();
        if let Some(p) = exp.pretrain_record() {
            history.push(MiouPoint {
                stage: 0,
                miou: p.target_val.miou,
            });
        }
        let view = View {
            stage: 0,
            strategy: exp.config().strategy,
            proposals: BTreeMap::new(),
            history,
            total_annotated: 0,
            last_error: None,
        };
        let state = Arc::new(AppState {
            session: Arc::new(Mutex::new(session)),
            running: AtomicBool::new(false),
            view: RwLock::new(view),
            data,
        });
        state.refresh(&state.session.lock().expect("session lock"), None);
        state
    }

    /// The session behind the API. Holding its lock stalls stage jobs.
    pub fn session(&self) -> &Arc<Mutex<Session>> {
        &self.session
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::SeqCst)
    }

    fn refresh(&self, session: &Session, error: Option<String>) {
        let mut view = self.view.write().expect("view lock");
        let exp = session.experiment();
        view.stage = session.stage();
        let selections = session
            .proposal()
            .selections
            .iter()
            .map(|s| (s.image_id.clone(), s.clone()))
            .collect();
        view.proposals.insert(session.stage(), selections);
        view.history.truncate(1);
        view.history
            .extend(exp.records().iter().map(|r| MiouPoint { stage: r.stage, miou: r.miou }));
        view.total_annotated = exp.store().total_annotated();
        view.last_error = error;
    }

    pub fn status(&self) -> Status {
        let view = self.view.read().expect("view lock");
        let total_pixels: usize = self.data.target_train.iter().map(|i| i.labels.as_slice().len()).sum();
        let proposed = view
            .proposals
            .get(&view.stage)
            .map_or(0, |m| m.values().map(|s| s.points.len()).sum());
        Status {
            stage: view.stage,
            strategy: view.strategy,
            running: self.is_running(),
            miou_history: view.history.clone(),
            budget: BudgetStatus {
                total_annotated: view.total_annotated,
                total_pixels,
                annotated_fraction: if total_pixels == 0 {
                    0.0
                } else {
                    view.total_annotated as f64 / total_pixels as f64
                },
                proposed,
            },
            last_error: view.last_error.clone(),
        }
    }

    fn proposal_batch(&self, id: &str, stage: Option<usize>) -> Result<ProposalBatch, ApiError> {
        let view = self.view.read().expect("view lock");
        let stage = stage.unwrap_or(view.stage);
        let by_image = view
            .proposals
            .get(&stage)
            .ok_or_else(|| ApiError::not_found(format!("no proposals for stage {stage}")))?;
        let sel = by_image
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
        let (points, mask) = if view.strategy == Strategy::Spl || view.strategy == Strategy::Supervised {
            let mut bits = vec![false; sel.width * sel.height];
            for i in sel.points.to_indices(sel.width) {
                bits[i] = true;
            }
            (None, Some(MaskRle::encode(sel.width, sel.height, &bits)))
        } else {
            (Some(sel.points.points().iter().map(|&(x, y)| [x, y]).collect()), None)
        };
        Ok(ProposalBatch {
            image_id: sel.image_id.clone(),
            stage,
            strategy: view.strategy,
            width: sel.width,
            height: sel.height,
            points,
            mask,
            palette: self.data.manifest.palette.clone(),
        })
    }
}

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>, String> {
    let raster = netpbm::image_to_rgb(image).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&raster.data).map_err(|e| e.to_string())?;
        writer.finish().map_err(|e| e.to_string())?;
    }
    Ok(out)
}

async fn image_png(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let item = state
        .data
        .target_train
        .iter()
        .find(|i| i.id == id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
    let png = encode_png(&item.image).map_err(|m| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", m))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn proposals(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Result<Json<ProposalBatch>, ApiError> {
    let stage = match query.get("stage") {
        Some(s) => Some(
            s.parse::<usize>()
                .map_err(|_| ApiError::bad_request(format!("stage {s:?} is not a number")))?,
        ),
        None => None,
    };
    state.proposal_batch(&id, stage).map(Json)
}

async fn annotations(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<AnnotationResponse>, ApiError> {
    let req: AnnotationRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))?;
    if state.is_running() {
        return Err(ApiError::busy());
    }
    let mut session = state.session.try_lock().map_err(|_| ApiError::busy())?;
    let response = session.annotate(&req)?;
    state.refresh(&session, None);
    Ok(Json(response))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvanceAccepted {
    pub stage: usize,
}

async fn advance(State(state): State<Arc<AppState>>) -> Result<(StatusCode, Json<AdvanceAccepted>), ApiError> {
    if state
        .running
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ApiError::busy());
    }
    let stage = state.view.read().expect("view lock").stage;
    let job = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut session = job.session.lock().expect("session lock");
        let error = match session.advance() {
            Ok(record) => {
                log::info!("stage {} done: mIoU {:.4}", record.stage, record.miou);
                None
            }
            Err(e) => {
                log::error!("stage {stage} failed: {e}");
                Some(e.to_string())
            }
        };
        job.refresh(&session, error);
        job.running.store(false, Ordering::SeqCst);
    });
    Ok((StatusCode::ACCEPTED, Json(AdvanceAccepted { stage })))
}

async fn status(State(state): State<Arc<AppState>>) -> Json<Status> {
    Json(state.status())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/images/{id}", get(image_png))
        .route("/api/images/{id}/proposals", get(proposals))
        .route("/api/annotations", post(annotations))
        .route("/api/stage/advance", post(advance))
        .route("/api/status", get(status))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

//! HTTP front end for the estimator. Every route takes and returns JSON.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use iguide_core::api::{
    DatasetLocation, ErrorBody, EstimateRequest, EvalRequest, Health, NormalizeRequest, ObservationRequest,
    ObservationResponse, OverlayRequest, OverlayResponse, RunRequest, SynthRequest,
};
use iguide_core::eval::{evaluate, EvalMetrics};
use iguide_core::fusion::{
    estimate_correspondence, estimate_or_fallback, normalize_frame, propagate_track, CorrespondenceQuery,
    CorrespondenceUncertainty, NormalizedFrame, TrackState,
};
use iguide_core::geometry::{CameraModel, RelativePose};
use iguide_core::nalgebra::Vector3;
use iguide_core::overlay::render_overlay;
use iguide_core::pipeline::{export_fixture, run_estimate, Dataset, DatasetPaths, FixtureSummary, RunOutput};
use iguide_core::synthlab::scenario;
use iguide_core::Error;

/// Request bodies carry whole images as JSON arrays.
pub const BODY_LIMIT: usize = 512 << 20;

#[derive(Clone, Default)]
pub struct AppState {
    tracks: Arc<Mutex<HashMap<u64, TrackState>>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                kind: kind.to_string(),
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Input(_) | Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::MissingFrame(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError {
            status,
            body: ErrorBody::from(&e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Runs CPU-bound work off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> iguide_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(Json(v)),
        Ok(Err(e)) => Err(e.into()),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
        )),
    }
}

fn checked_pose(camera: &CameraModel, rel: &RelativePose) -> iguide_core::Result<RelativePose> {
    camera.validate()?;
    RelativePose::new(*rel.rotation.matrix(), rel.translation)
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/estimate", post(estimate))
        .route("/v1/runs", post(run))
        .route("/v1/synth", post(synth))
        .route("/v1/eval", post(eval))
        .route("/v1/overlay", post(overlay))
        .route("/v1/normalize", post(normalize))
        .route("/v1/tracks", get(list_tracks))
        .route("/v1/tracks/{id}", get(get_track).delete(delete_track))
        .route("/v1/tracks/{id}/observations", post(observe))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(AppState::default())
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` and serves on the current runtime. Port 0 picks a free port.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn estimate(Json(req): Json<EstimateRequest>) -> ApiResult<CorrespondenceUncertainty> {
    blocking(move || {
        let rel = checked_pose(&req.camera, &req.rel)?;
        req.config.validate()?;
        req.ref_image.validate()?;
        req.tgt_image.validate()?;
        let query = CorrespondenceQuery {
            camera: req.camera,
            rel,
            x_ref: req.x_ref,
            ref_patches: req.ref_patches,
            x_v: req.x_v,
            ref_image: &req.ref_image,
            tgt_image: &req.tgt_image,
            depth: req.depth,
            seed: req.seed,
        };
        if req.fallback {
            Ok(estimate_or_fallback(&query, &req.config))
        } else {
            estimate_correspondence(&query, &req.config)
        }
    })
    .await
}

async fn run(Json(req): Json<RunRequest>) -> ApiResult<RunOutput> {
    blocking(move || {
        req.config.validate()?;
        let paths = match req.dataset {
            DatasetLocation::Dir { dir } => DatasetPaths::in_dir(&dir),
            DatasetLocation::Files(paths) => paths,
        };
        let dataset = Dataset::load(&paths)?;
        run_estimate(&dataset, &req.config)
    })
    .await
}

async fn synth(Json(req): Json<SynthRequest>) -> ApiResult<FixtureSummary> {
    blocking(move || {
        let sc = scenario(&req.scenario, req.seed)?;
        export_fixture(&sc, &Vector3::from(req.gravity), &req.out_dir)
    })
    .await
}

async fn eval(Json(req): Json<EvalRequest>) -> ApiResult<EvalMetrics> {
    blocking(move || evaluate(&req.results, &req.truth, req.visual.as_deref())).await
}

async fn overlay(Json(req): Json<OverlayRequest>) -> ApiResult<OverlayResponse> {
    blocking(move || {
        req.image.validate()?;
        Ok(OverlayResponse {
            svg: render_overlay(&req.image, &req.rows)?,
        })
    })
    .await
}

async fn normalize(Json(req): Json<NormalizeRequest>) -> ApiResult<NormalizedFrame> {
    blocking(move || normalize_frame(&req.uncertainties, req.target_det)).await
}

async fn list_tracks(State(state): State<AppState>) -> Json<Vec<TrackState>> {
    let tracks = state.tracks.lock().unwrap();
    let mut all: Vec<TrackState> = tracks.values().cloned().collect();
    all.sort_by_key(|t| t.track_id);
    Json(all)
}

async fn get_track(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<TrackState> {
    state
        .tracks
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| not_found(id))
}

async fn delete_track(State(state): State<AppState>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    match state.tracks.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(not_found(id)),
    }
}

fn not_found(id: u64) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no track {id}"))
}

async fn observe(
    State(state): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<ObservationRequest>,
) -> ApiResult<ObservationResponse> {
    let previous = state.tracks.lock().unwrap().get(&id).cloned();
    let Some(prev) = previous else {
        let detected = TrackState::detect(id, req.frame, req.point);
        state.tracks.lock().unwrap().insert(id, detected.clone());
        return Ok(Json(ObservationResponse {
            state: detected,
            estimate: None,
        }));
    };
    if req.frame <= prev.last_frame {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "stale_frame",
            format!("track {id} is at frame {}, got frame {}", prev.last_frame, req.frame),
        ));
    }
    let Some(pair) = req.pair else {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "input",
            format!("track {id} exists; the observation needs a reference/target pair"),
        ));
    };
    let base = prev.clone();
    let Json(next) = blocking(move || {
        let rel = checked_pose(&pair.camera, &pair.rel)?;
        req.config.validate()?;
        pair.ref_image.validate()?;
        pair.tgt_image.validate()?;
        let query = CorrespondenceQuery {
            camera: pair.camera,
            rel,
            x_ref: base.reference_points[0],
            ref_patches: base.reference_points.clone(),
            x_v: req.point,
            ref_image: &pair.ref_image,
            tgt_image: &pair.tgt_image,
            depth: req.depth,
            seed: req.seed,
        };
        let est = estimate_or_fallback(&query, &req.config);
        let next = propagate_track(&base, req.frame, &est, req.propagation);
        Ok(ObservationResponse {
            state: next,
            estimate: Some(est),
        })
    })
    .await?;
    let mut tracks = state.tracks.lock().unwrap();
    if tracks.get(&id) != Some(&prev) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "concurrent_update",
            format!("track {id} changed while the observation was processed"),
        ));
    }
    tracks.insert(id, next.state.clone());
    Ok(Json(next))
}

//! Request and response bodies shared by the HTTP service and its client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::energy::ImagePlane;
use crate::error::Error;
use crate::fusion::{CorrespondenceUncertainty, EstimatorConfig, PropagationMode, TrackState};
use crate::geometry::{CameraModel, Pixel, RelativePose};
use crate::io::{ResultRow, TrackObservation, TruthRow};
use crate::pipeline::{DatasetPaths, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// One correspondence with both images inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub camera: CameraModel,
    pub rel: RelativePose,
    pub x_ref: Pixel,
    #[serde(default)]
    pub ref_patches: Vec<Pixel>,
    pub x_v: Pixel,
    pub ref_image: ImagePlane,
    pub tgt_image: ImagePlane,
    #[serde(default)]
    pub depth: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: EstimatorConfig,
    /// Return the visual point with the default covariance instead of an error.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetLocation {
    Dir { dir: PathBuf },
    Files(DatasetPaths),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub dataset: DatasetLocation,
    #[serde(default)]
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub scenario: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
}

fn default_gravity() -> [f64; 3] {
    RunConfig::default().gravity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub results: Vec<ResultRow>,
    pub truth: Vec<TruthRow>,
    #[serde(default)]
    pub visual: Option<Vec<TrackObservation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRequest {
    pub image: ImagePlane,
    pub rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayResponse {
    pub svg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeRequest {
    pub uncertainties: Vec<CorrespondenceUncertainty>,
    pub target_det: f64,
}

/// Images and geometry linking a track's previous frame to the new one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub camera: CameraModel,
    pub rel: RelativePose,
    pub ref_image: ImagePlane,
    pub tgt_image: ImagePlane,
}

/// A new observation of a track kept by the service. The first observation
/// of an unknown track is its detection and needs no pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRequest {
    pub frame: u64,
    pub point: Pixel,
    /// Depth prior of the track's reference point in the previous frame.
    #[serde(default)]
    pub depth: Option<f64>,
    #[serde(default)]
    pub pair: Option<PairInput>,
    #[serde(default)]
    pub config: EstimatorConfig,
    #[serde(default)]
    pub propagation: PropagationMode,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationResponse {
    pub state: TrackState,
    pub estimate: Option<CorrespondenceUncertainty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        let kind = match e {
            Error::Domain(_) => "domain",
            Error::Input(_) => "input",
            Error::GuidanceUnavailable => "guidance_unavailable",
            Error::TriangulationDegenerate(_) => "triangulation_degenerate",
            Error::EpipolarDegenerate(_) => "epipolar_degenerate",
            Error::NoGuidance => "no_guidance",
            Error::Config(_) => "config",
            Error::GridDegenerate { .. } => "grid_degenerate",
            Error::SamplingOutOfBounds { .. } => "sampling_out_of_bounds",
            Error::PatchOutOfBounds { .. } => "patch_out_of_bounds",
            Error::FitFailed(_) => "fit_failed",
            Error::MarginalizationFailed(_) => "marginalization_failed",
            Error::NormalizationSkipped(_) => "normalization_skipped",
            Error::Parse { .. } => "parse",
            Error::MissingFrame(_) => "missing_frame",
            Error::Io(_) => "io",
        };
        ErrorBody {
            kind: kind.to_string(),
            message: e.to_string(),
        }
    }
}

//! Marginalization over guidance hypotheses, the end-to-end estimator, track
//! propagation and per-image covariance normalization.

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::energy::{
    combine_energies, fit_energy_scale, guidance_only, CombinedWeights, EnergyConfig, ImagePlane, PatchErrorField,
    ScaledEnergy,
};
use crate::error::{Error, Result};
use crate::geometry::{triangulate, CameraModel, Pixel, RelativePose};
use crate::guidance::{
    build_grid, calibrate_guidance, sample_depths, sample_guidance_points, GuidanceConfig, GuidanceModel, GuidancePoint,
};

pub const EIGEN_FLOOR: f64 = 1e-9;

/// Baseline feature noise of 1.5 px per axis.
const BASELINE_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Mean covariance determinant every image is scaled to, px^4.
    pub target_det: f64,
    /// Isotropic variance reported when estimation fails entirely, px^2.
    pub default_variance: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            target_det: BASELINE_SIGMA.powi(4),
            default_variance: BASELINE_SIGMA.powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub guidance: GuidanceConfig,
    pub energy: EnergyConfig,
    pub fusion: FusionConfig,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.energy.validate()?;
        if !(self.fusion.target_det > 0.0 && self.fusion.target_det.is_finite()) {
            return Err(Error::Config("target_det must be positive".into()));
        }
        if !(self.fusion.default_variance > 0.0 && self.fusion.default_variance.is_finite()) {
            return Err(Error::Config("default_variance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    Guided,
    /// No usable guidance; the visual point served as its own guidance.
    PureVisual,
    /// Everything failed; visual point with the default covariance.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisDiagnostics {
    pub guidance: Pixel,
    pub distance: f64,
    /// `None` when the scale fit failed and guidance-only weights were used.
    pub k_star: Option<f64>,
    pub lambda: f64,
    pub clipped: bool,
    pub degenerate: bool,
    pub fit_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceUncertainty {
    pub mean: Pixel,
    pub covariance: Matrix2<f64>,
    pub visual_point: Pixel,
    pub hypotheses_used: usize,
    pub mode: EstimateMode,
    pub diagnostics: Vec<HypothesisDiagnostics>,
}

impl CorrespondenceUncertainty {
    pub fn fallback(visual_point: Pixel, variance: f64) -> Self {
        CorrespondenceUncertainty {
            mean: visual_point,
            covariance: Matrix2::identity() * variance,
            visual_point,
            hypotheses_used: 0,
            mode: EstimateMode::Fallback,
            diagnostics: Vec::new(),
        }
    }

    /// Mean `k*` over fitted hypotheses, NaN when none were fitted.
    pub fn mean_k_star(&self) -> f64 {
        mean_of(self.diagnostics.iter().filter_map(|d| d.k_star))
    }

    pub fn mean_lambda(&self) -> f64 {
        mean_of(self.diagnostics.iter().map(|d| d.lambda))
    }

    pub fn any_clipped(&self) -> bool {
        self.diagnostics.iter().any(|d| d.clipped)
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Symmetrizes and floors the eigenvalues of a 2x2 covariance.
pub fn floor_covariance(cov: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = 0.5 * (cov + cov.transpose());
    let eig = SymmetricEigen::new(sym);
    let vals = eig
        .eigenvalues
        .map(|v| if v.is_finite() { v.max(floor) } else { floor });
    let v = eig.eigenvectors;
    let out = v * Matrix2::from_diagonal(&vals) * v.transpose();
    0.5 * (out + out.transpose())
}

/// Mean and covariance of the mixture of all hypotheses' sample weights,
/// normalized jointly to sum to one.
pub fn marginalize(hypotheses: &[CombinedWeights]) -> Result<(Pixel, Matrix2<f64>)> {
    if hypotheses.is_empty() {
        return Err(Error::MarginalizationFailed("no hypotheses".into()));
    }
    let max = hypotheses
        .iter()
        .flat_map(|h| h.log_weights.iter().copied())
        .filter(|l| !l.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::MarginalizationFailed(format!("maximum log-weight {max}")));
    }
    let weighted: Vec<(Pixel, f64)> = hypotheses
        .iter()
        .flat_map(|h| h.points.iter().zip(&h.log_weights))
        .map(|(p, l)| (*p, if l.is_nan() { 0.0 } else { (l - max).exp() }))
        .collect();
    let total: f64 = weighted.iter().map(|(_, w)| w).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::MarginalizationFailed(format!("total weight {total}")));
    }
    let mut mean = Pixel::zeros();
    for (p, w) in &weighted {
        mean += p * (w / total);
    }
    let mut cov = Matrix2::zeros();
    for (p, w) in &weighted {
        let d = p - mean;
        cov += d * d.transpose() * (w / total);
    }
    Ok((mean, floor_covariance(&cov, EIGEN_FLOOR)))
}

/// Everything the estimator conditions on for one correspondence.
#[derive(Debug, Clone)]
pub struct CorrespondenceQuery<'a> {
    pub camera: CameraModel,
    pub rel: RelativePose,
    /// Reference point used for reprojection.
    pub x_ref: Pixel,
    /// Reference patch centers whose errors are averaged; defaults to `[x_ref]` when empty.
    pub ref_patches: Vec<Pixel>,
    pub x_v: Pixel,
    pub ref_image: &'a ImagePlane,
    pub tgt_image: &'a ImagePlane,
    /// Depth prior of the reference point; triangulated when absent.
    pub depth: Option<f64>,
    pub seed: u64,
}

/// One guidance hypothesis carried through the energy stages.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub model: GuidanceModel,
    /// `None` when the fit failed.
    pub scaled: Option<ScaledEnergy>,
    pub weights: CombinedWeights,
    pub field: PatchErrorField,
    pub diagnostics: HypothesisDiagnostics,
}

fn run_hypothesis(
    query: &CorrespondenceQuery<'_>,
    refs: &[Pixel],
    guidance: &GuidancePoint,
    config: &EstimatorConfig,
) -> Result<Hypothesis> {
    let model = calibrate_guidance(&query.x_v, guidance, &config.guidance)?;
    let bounds = query.tgt_image.patch_bounds(config.energy.patch_half);
    let grid = build_grid(&model, &config.guidance, &bounds)?;
    let field = PatchErrorField::compute(grid, query.ref_image, query.tgt_image, refs, config.energy.patch_half)?;
    let (weights, scaled) = match fit_energy_scale(&field, &model) {
        Ok(scaled) => (combine_energies(&scaled, &model, &field, &config.energy), Some(scaled)),
        Err(Error::FitFailed(_)) => (guidance_only(&model, &field), None),
        Err(e) => return Err(e),
    };
    Ok(Hypothesis {
        diagnostics: HypothesisDiagnostics {
            guidance: model.x_g,
            distance: model.distance,
            k_star: scaled.as_ref().map(|s| s.k_star),
            lambda: weights.lambda,
            clipped: model.clipped,
            degenerate: scaled.as_ref().is_some_and(|s| s.degenerate),
            fit_failed: scaled.is_none(),
        },
        model,
        scaled,
        weights,
        field,
    })
}

/// Guidance points for the query, or `None` when the guided path is unavailable.
fn guided_points(query: &CorrespondenceQuery<'_>, config: &GuidanceConfig) -> Option<Vec<GuidancePoint>> {
    let depth = match query.depth {
        Some(d) => d,
        None => triangulate(&query.camera, &query.rel, &query.x_ref, &query.x_v).ok()?,
    };
    let depths = sample_depths(depth, config, query.seed).ok()?;
    sample_guidance_points(&query.camera, &query.rel, &query.x_ref, &query.x_v, &depths, config).ok()
}

/// Runs every stage and returns the hypotheses that survived.
pub fn estimate_hypotheses(
    query: &CorrespondenceQuery<'_>,
    config: &EstimatorConfig,
) -> Result<(EstimateMode, Vec<Hypothesis>)> {
    let refs: Vec<Pixel> = if query.ref_patches.is_empty() {
        vec![query.x_ref]
    } else {
        query.ref_patches.clone()
    };
    if let Some(points) = guided_points(query, &config.guidance) {
        let hyps: Vec<_> = points
            .iter()
            .filter_map(|g| run_hypothesis(query, &refs, g, config).ok())
            .collect();
        if !hyps.is_empty() {
            return Ok((EstimateMode::Guided, hyps));
        }
    }
    let own = GuidancePoint {
        position: query.x_v,
        clipped: false,
        source_depth: None,
    };
    let hyp = run_hypothesis(query, &refs, &own, config)?;
    Ok((EstimateMode::PureVisual, vec![hyp]))
}

pub fn estimate_correspondence(
    query: &CorrespondenceQuery<'_>,
    config: &EstimatorConfig,
) -> Result<CorrespondenceUncertainty> {
    let (mode, hyps) = estimate_hypotheses(query, config)?;
    let weights: Vec<CombinedWeights> = hyps.iter().map(|h| h.weights.clone()).collect();
    let (mean, covariance) = marginalize(&weights)?;
    Ok(CorrespondenceUncertainty {
        mean,
        covariance,
        visual_point: query.x_v,
        hypotheses_used: hyps.len(),
        mode,
        diagnostics: hyps.into_iter().map(|h| h.diagnostics).collect(),
    })
}

/// Like [`estimate_correspondence`], substituting the visual point and the
/// default covariance on failure.
pub fn estimate_or_fallback(query: &CorrespondenceQuery<'_>, config: &EstimatorConfig) -> CorrespondenceUncertainty {
    estimate_correspondence(query, config)
        .unwrap_or_else(|_| CorrespondenceUncertainty::fallback(query.x_v, config.fusion.default_variance))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// The next pair uses the current mean as its reference point.
    #[default]
    SingleSample,
    /// Patch errors are averaged over reference patches at the mean and the visual point.
    WithVisual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub track_id: u64,
    pub first_frame: u64,
    pub last_frame: u64,
    pub mean: Pixel,
    pub covariance: Matrix2<f64>,
    pub accumulated_covariance: Matrix2<f64>,
    /// Reference patch centers for the next pair; the first is also the reprojection point.
    pub reference_points: Vec<Pixel>,
    pub observations: usize,
}

impl TrackState {
    /// A freshly detected feature with no uncertainty yet.
    pub fn detect(track_id: u64, frame: u64, point: Pixel) -> Self {
        TrackState {
            track_id,
            first_frame: frame,
            last_frame: frame,
            mean: point,
            covariance: Matrix2::zeros(),
            accumulated_covariance: Matrix2::zeros(),
            reference_points: vec![point],
            observations: 0,
        }
    }
}

pub fn propagate_track(
    state: &TrackState,
    frame: u64,
    estimate: &CorrespondenceUncertainty,
    mode: PropagationMode,
) -> TrackState {
    let accumulated = floor_covariance(&(state.accumulated_covariance + estimate.covariance), EIGEN_FLOOR);
    let mut reference_points = vec![estimate.mean];
    if mode == PropagationMode::WithVisual && estimate.visual_point != estimate.mean {
        reference_points.push(estimate.visual_point);
    }
    TrackState {
        track_id: state.track_id,
        first_frame: state.first_frame,
        last_frame: frame,
        mean: estimate.mean,
        covariance: estimate.covariance,
        accumulated_covariance: accumulated,
        reference_points,
        observations: state.observations + 1,
    }
}

const DET_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedFrame {
    pub uncertainties: Vec<CorrespondenceUncertainty>,
    pub scale: f64,
    /// Set when the mean determinant was too small to rescale.
    pub skipped: bool,
}

/// Scales every covariance of one image so the mean determinant equals `target_det`.
pub fn normalize_frame(uncertainties: &[CorrespondenceUncertainty], target_det: f64) -> Result<NormalizedFrame> {
    if uncertainties.is_empty() {
        return Err(Error::Input("no uncertainties to normalize".into()));
    }
    if !(target_det > 0.0 && target_det.is_finite()) {
        return Err(Error::Input(format!(
            "target determinant {target_det} must be positive"
        )));
    }
    let dets: Vec<f64> = uncertainties.iter().map(|u| u.covariance.determinant()).collect();
    if dets.iter().any(|d| !d.is_finite()) {
        return Err(Error::Input("non-finite covariance determinant".into()));
    }
    let mean_det = dets.iter().sum::<f64>() / dets.len() as f64;
    if mean_det <= DET_FLOOR {
        return Ok(NormalizedFrame {
            uncertainties: uncertainties.to_vec(),
            scale: 1.0,
            skipped: true,
        });
    }
    let scale = (target_det / mean_det).sqrt();
    let scaled = uncertainties
        .iter()
        .map(|u| CorrespondenceUncertainty {
            covariance: u.covariance * scale,
            ..u.clone()
        })
        .collect();
    Ok(NormalizedFrame {
        uncertainties: scaled,
        scale,
        skipped: false,
    })
}

//! Patch-error energies on a sample grid, the energy-scale fit and the
//! combination with the guidance prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::guidance::{Bounds, GuidanceModel, SampleGrid};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, intensities: Vec<f64>) -> Result<Self> {
        let image = ImagePlane {
            width,
            height,
            intensities,
        };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<()> {
        let (width, height) = (self.width, self.height);
        if width < 2 || height < 2 {
            return Err(Error::Input(format!("image {width}x{height} too small")));
        }
        if self.intensities.len() != width * height {
            return Err(Error::Input(format!(
                "expected {} intensities, got {}",
                width * height,
                self.intensities.len()
            )));
        }
        if let Some(v) = self.intensities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("intensity {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        ImagePlane {
            width,
            height,
            intensities: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.intensities[y * self.width + x]
    }

    /// Region of patch centers for which every sample of a `2 * half` square stays inside.
    pub fn patch_bounds(&self, half: usize) -> Bounds {
        let margin = half as f64 - 0.5;
        Bounds {
            min_x: margin,
            min_y: margin,
            max_x: (self.width - 1) as f64 - margin,
            max_y: (self.height - 1) as f64 - margin,
        }
    }
}

/// Bilinear interpolation.
pub fn sample_intensity(image: &ImagePlane, point: &Pixel) -> Result<f64> {
    let (x, y) = (point.x, point.y);
    let max_x = (image.width - 1) as f64;
    let max_y = (image.height - 1) as f64;
    if !(x >= 0.0 && x <= max_x && y >= 0.0 && y <= max_y) {
        return Err(Error::SamplingOutOfBounds { x, y });
    }
    Ok(bilinear(image, x, y))
}

#[inline]
fn bilinear(image: &ImagePlane, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(image.width - 2);
    let y0 = (y.floor() as usize).min(image.height - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let row0 = y0 * image.width + x0;
    let row1 = row0 + image.width;
    let d = &image.intensities;
    (1.0 - fy) * ((1.0 - fx) * d[row0] + fx * d[row0 + 1]) + fy * ((1.0 - fx) * d[row1] + fx * d[row1 + 1])
}

/// Root-mean-square intensity difference between the reference patch at
/// `x_ref` and the target patch at `x`. The patch is the `2 * half` square of
/// offsets `i + 1/2 - half`, centered on the point.
pub fn patch_rmse(
    ref_image: &ImagePlane,
    tgt_image: &ImagePlane,
    x_ref: &Pixel,
    x: &Pixel,
    patch_half: usize,
) -> Result<f64> {
    if patch_half == 0 {
        return Err(Error::Input("patch_half must be at least 1".into()));
    }
    if !ref_image.patch_bounds(patch_half).contains(x_ref) {
        return Err(Error::PatchOutOfBounds { x: x_ref.x, y: x_ref.y });
    }
    if !tgt_image.patch_bounds(patch_half).contains(x) {
        return Err(Error::PatchOutOfBounds { x: x.x, y: x.y });
    }
    let side = 2 * patch_half;
    let mut sum = 0.0;
    for j in 0..side {
        let dy = j as f64 + 0.5 - patch_half as f64;
        for i in 0..side {
            let dx = i as f64 + 0.5 - patch_half as f64;
            let a = bilinear(ref_image, x_ref.x + dx, x_ref.y + dy);
            let b = bilinear(tgt_image, x.x + dx, x.y + dy);
            sum += (a - b) * (a - b);
        }
    }
    Ok((sum / (side * side) as f64).sqrt())
}

/// Patch error averaged over several reference patches (same reference image).
pub fn patch_rmse_multi(
    ref_image: &ImagePlane,
    tgt_image: &ImagePlane,
    refs: &[Pixel],
    x: &Pixel,
    patch_half: usize,
) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Input("no reference points".into()));
    }
    let mut total = 0.0;
    for r in refs {
        total += patch_rmse(ref_image, tgt_image, r, x, patch_half)?;
    }
    Ok(total / refs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub patch_half: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Fixes the combination weight instead of deriving it from the energy minima.
    pub lambda_override: Option<f64>,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            patch_half: 5,
            lambda_lo: 0.1,
            lambda_hi: 0.9,
            lambda_override: None,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_half == 0 {
            return Err(Error::Config("patch_half must be at least 1".into()));
        }
        if !(0.0 <= self.lambda_lo && self.lambda_lo <= self.lambda_hi && self.lambda_hi <= 1.0) {
            return Err(Error::Config(format!(
                "lambda bounds [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                self.lambda_lo, self.lambda_hi
            )));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda override {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchErrorField {
    pub grid: SampleGrid,
    /// One entry per lattice point; `None` where the point is masked.
    pub errors: Vec<Option<f64>>,
    pub error_at_xv: f64,
}

impl PatchErrorField {
    pub fn compute(
        grid: SampleGrid,
        ref_image: &ImagePlane,
        tgt_image: &ImagePlane,
        refs: &[Pixel],
        patch_half: usize,
    ) -> Result<Self> {
        let error_at_xv = patch_rmse_multi(ref_image, tgt_image, refs, &grid.center, patch_half)?;
        let errors = grid
            .points
            .iter()
            .zip(&grid.in_bounds)
            .map(|(p, &ok)| {
                if ok {
                    patch_rmse_multi(ref_image, tgt_image, refs, p, patch_half).ok()
                } else {
                    None
                }
            })
            .collect::<Vec<_>>();
        let valid = errors.iter().filter(|e| e.is_some()).count();
        if valid < 4 {
            return Err(Error::GridDegenerate { valid });
        }
        Ok(PatchErrorField {
            grid,
            errors,
            error_at_xv,
        })
    }

    /// Sample points with their errors; the visual point comes first.
    pub fn samples(&self) -> impl Iterator<Item = (Pixel, f64)> + '_ {
        std::iter::once((self.grid.center, self.error_at_xv)).chain(
            self.grid
                .points
                .iter()
                .zip(&self.errors)
                .filter_map(|(p, e)| e.map(|e| (*p, e))),
        )
    }

    pub fn sample_count(&self) -> usize {
        1 + self.errors.iter().filter(|e| e.is_some()).count()
    }
}

/// Scaled error distribution `p_k(x) = q(x_v) * exp(-k (e(x) - e(x_v)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledEnergy {
    pub k_star: f64,
    /// Values of `p_k` at the field samples, in `PatchErrorField::samples` order.
    pub densities: Vec<f64>,
    pub degenerate: bool,
}

pub const K_MIN: f64 = 1e-6;
pub const K_MAX: f64 = 1e4;
const K_TOL: f64 = 1e-6;
const MAX_BISECTIONS: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const FLAT_FIELD: f64 = 1e-9;

/// Per-sample terms that the divergence depends on.
struct FitTerms {
    /// `e(x) - e(x_v)`
    delta: Vec<f64>,
    /// `ln q(x_v) - ln q(x)`
    log_ratio: Vec<f64>,
}

impl FitTerms {
    fn new(field: &PatchErrorField, model: &GuidanceModel) -> Self {
        let log_qv = model.log_density(&model.x_v);
        let (delta, log_ratio) = field
            .samples()
            .map(|(x, e)| (e - field.error_at_xv, log_qv - model.log_density(&x)))
            .unzip();
        FitTerms { delta, log_ratio }
    }

    /// Derivative in `k` of the divergence between `p_k` and `q` over the samples.
    ///
    /// Both measures are unnormalized on the sample set, so the divergence is
    /// `sum p ln(p/q) - p + q`, whose derivative is `-sum delta p ln(p/q)`.
    /// The common factor `q(x_v)` is dropped; it does not move the root.
    fn gradient(&self, k: f64) -> f64 {
        self.delta
            .iter()
            .zip(&self.log_ratio)
            .map(|(&d, &lr)| {
                let log_p_over_q = lr - k * d;
                -d * (-k * d).exp() * log_p_over_q
            })
            .sum()
    }
}

/// Derivative of the fit objective at `k`, scaled to the actual densities.
pub fn fit_gradient(field: &PatchErrorField, model: &GuidanceModel, k: f64) -> f64 {
    FitTerms::new(field, model).gradient(k) * model.density(&model.x_v)
}

pub fn fit_energy_scale(field: &PatchErrorField, model: &GuidanceModel) -> Result<ScaledEnergy> {
    let q_v = model.density(&model.x_v);
    let (lo_e, hi_e) = field
        .samples()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, e)| {
            (lo.min(e), hi.max(e))
        });
    if hi_e - lo_e < FLAT_FIELD {
        return Ok(ScaledEnergy {
            k_star: 1.0,
            densities: vec![q_v; field.sample_count()],
            degenerate: true,
        });
    }

    let terms = FitTerms::new(field, model);
    let g = |k: f64| terms.gradient(k);

    // expand outward from k = 1 until the gradient turns from negative to positive
    let (mut lo, mut hi);
    let g1 = g(1.0);
    if g1 == 0.0 {
        return Ok(scaled(field, q_v, 1.0));
    } else if g1 < 0.0 {
        lo = 1.0;
        hi = 10.0;
        while g(hi) < 0.0 {
            if hi >= K_MAX {
                return Err(Error::FitFailed("no sign change below k = 1e4".into()));
            }
            lo = hi;
            hi = (hi * 10.0).min(K_MAX);
        }
    } else {
        hi = 1.0;
        lo = 0.1;
        while g(lo) > 0.0 {
            if lo <= K_MIN {
                return Err(Error::FitFailed("no sign change above k = 1e-6".into()));
            }
            hi = lo;
            lo = (lo * 0.1).max(K_MIN);
        }
    }

    // the gradient is scaled by q(x_v) when reported; stop once both the
    // bracket and the reported gradient are small
    let grad_tol = GRAD_TOL / q_v;
    let mut k = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTIONS {
        k = 0.5 * (lo + hi);
        let gm = g(k);
        if (hi - lo <= K_TOL && gm.abs() < grad_tol) || gm == 0.0 || k <= lo || k >= hi {
            break;
        }
        if gm < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
    }
    Ok(scaled(field, q_v, k))
}

fn scaled(field: &PatchErrorField, q_v: f64, k: f64) -> ScaledEnergy {
    let densities = field
        .samples()
        .map(|(_, e)| q_v * (-k * (e - field.error_at_xv)).exp())
        .collect();
    ScaledEnergy {
        k_star: k,
        densities,
        degenerate: false,
    }
}

/// Per-sample combined log-density `(1 - lambda) ln p_k + lambda ln q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedWeights {
    pub lambda: f64,
    pub points: Vec<Pixel>,
    pub log_weights: Vec<f64>,
}

impl CombinedWeights {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }
}

/// Combination weight from the energy minima, before clamping.
pub fn lambda_rule(image_energy_min: f64, distance_energy_min: f64) -> f64 {
    image_energy_min / (image_energy_min + distance_energy_min + 1e-9)
}

/// Evaluates the combined log-density at an arbitrary point given its patch error.
pub fn combined_log_density(
    scaled: &ScaledEnergy,
    model: &GuidanceModel,
    error_at_xv: f64,
    lambda: f64,
    x: &Pixel,
    error: f64,
) -> f64 {
    let log_qv = model.log_density(&model.x_v);
    let log_pk = log_qv - scaled.k_star * (error - error_at_xv);
    (1.0 - lambda) * log_pk + lambda * model.log_density(x)
}

pub fn combine_energies(
    scaled: &ScaledEnergy,
    model: &GuidanceModel,
    field: &PatchErrorField,
    config: &EnergyConfig,
) -> CombinedWeights {
    let lambda = combination_lambda(scaled, model, field, config);
    let (points, log_weights) = field
        .samples()
        .map(|(x, e)| (x, combined_log_density(scaled, model, field.error_at_xv, lambda, &x, e)))
        .unzip();
    CombinedWeights {
        lambda,
        points,
        log_weights,
    }
}

pub fn combination_lambda(
    scaled: &ScaledEnergy,
    model: &GuidanceModel,
    field: &PatchErrorField,
    config: &EnergyConfig,
) -> f64 {
    if let Some(l) = config.lambda_override {
        return l;
    }
    if scaled.degenerate {
        return 1.0;
    }
    let log_qv = model.log_density(&model.x_v);
    let (image_min, distance_min) = field
        .samples()
        .fold((f64::INFINITY, f64::INFINITY), |(im, dm), (x, e)| {
            let image = scaled.k_star * (e - field.error_at_xv) - log_qv;
            (im.min(image), dm.min(model.energy(&x)))
        });
    lambda_rule(image_min, distance_min).clamp(config.lambda_lo, config.lambda_hi)
}

/// Guidance-only weights, used when the scale fit fails.
pub fn guidance_only(model: &GuidanceModel, field: &PatchErrorField) -> CombinedWeights {
    let (points, log_weights) = field.samples().map(|(x, _)| (x, model.log_density(&x))).unzip();
    CombinedWeights {
        lambda: 1.0,
        points,
        log_weights,
    }
}

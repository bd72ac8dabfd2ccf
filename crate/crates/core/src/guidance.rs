//! Guidance points from inertial reprojection and the asymmetric guidance
//! prior built around the visual point and one guidance point.
//!
//! Every model lives in a rotated frame whose first axis points from the
//! visual point `x_v` towards the guidance point `x_g`. In that frame the
//! distance energy is separable:
//!
//! ```text
//! psi(u, v) = |v| + beta * |u| + (1 - beta) * |u - D|
//! ```
//!
//! so the normalizer is a product of two one-dimensional integrals.

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{epipolar_line, reproject_with_depth, triangulate, CameraModel, Pixel, RelativePose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Energy scale, 1/px.
    pub alpha: f64,
    /// Density ratio between visual and guidance point at `d_max`.
    pub r_max: f64,
    /// Clipping distance, px.
    pub d_max: f64,
    /// Half-size of the square grid when guidance and visual point coincide, px.
    pub l0: f64,
    /// Grid subdivisions per axis; the grid has `(n + 1)^2` points.
    pub n: usize,
    /// Depth standard deviation relative to the mean depth.
    pub depth_sigma_ratio: f64,
    /// Number of guidance hypotheses.
    pub num_guidance: usize,
    /// Replace one depth sample by the point on the epipolar line nearest to `x_v`.
    pub epipolar_candidate: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha: 0.89,
            r_max: 3.0,
            d_max: 3.0,
            l0: 1.0,
            n: 3,
            depth_sigma_ratio: 0.1,
            num_guidance: 3,
            epipolar_candidate: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.r_max, self.d_max, self.l0, self.depth_sigma_ratio]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("non-finite guidance parameter".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.r_max > 1.0) {
            return Err(Error::Config(format!("r_max must exceed 1, got {}", self.r_max)));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        if !(self.l0 > 0.0) {
            return Err(Error::Config(format!("l0 must be positive, got {}", self.l0)));
        }
        if self.n < 1 {
            return Err(Error::Config("grid subdivision n must be at least 1".into()));
        }
        if self.depth_sigma_ratio < 0.0 {
            return Err(Error::Config("depth_sigma_ratio must be non-negative".into()));
        }
        if self.num_guidance < 1 {
            return Err(Error::Config("num_guidance must be at least 1".into()));
        }
        const STEPS: usize = 2048;
        for i in 0..=STEPS {
            let d = self.d_max * i as f64 / STEPS as f64;
            let beta = beta_for_distance(self, d);
            if !(beta > 0.5 && beta <= 1.0) {
                return Err(Error::Config(format!(
                    "beta({d}) = {beta} outside (1/2, 1]; adjust alpha, r_max or d_max"
                )));
            }
            let l = self.l0 - (1.0 - beta) * d;
            if !(l > 0.0) {
                return Err(Error::Config(format!(
                    "grid half-size l = {l} not positive at D = {d}; reduce d_max or raise l0"
                )));
            }
        }
        Ok(())
    }

    /// Number of depth samples; one slot goes to the epipolar candidate when enabled.
    pub fn depth_sample_count(&self) -> usize {
        if self.epipolar_candidate && self.num_guidance > 1 {
            self.num_guidance - 1
        } else {
            self.num_guidance
        }
    }
}

/// Ratio `q(x_v) / q(x_g)`, growing linearly from 1 at `D = 0` to `r_max` at `d_max`.
pub fn density_ratio(config: &GuidanceConfig, distance: f64) -> f64 {
    1.0 + (config.r_max - 1.0) * distance / config.d_max
}

pub fn beta_for_distance(config: &GuidanceConfig, distance: f64) -> f64 {
    let k = (config.r_max - 1.0) / config.d_max;
    if distance * k < 1e-8 {
        // ln(1 + kD) / D = k - k^2 D / 2 + O(D^2)
        0.5 + (k - 0.5 * k * k * distance) / (2.0 * config.alpha)
    } else {
        0.5 + density_ratio(config, distance).ln() / (2.0 * config.alpha * distance)
    }
}

/// Draws depth hypotheses. The first is always the mean itself.
pub fn sample_depths(depth_mean: f64, config: &GuidanceConfig, rng_seed: u64) -> Result<Vec<f64>> {
    if !(depth_mean > 0.0 && depth_mean.is_finite()) {
        return Err(Error::Input(format!("depth mean {depth_mean} must be positive")));
    }
    let count = config.depth_sample_count();
    let sigma = config.depth_sigma_ratio * depth_mean;
    let mut depths = Vec::with_capacity(count);
    depths.push(depth_mean);
    if count == 1 {
        return Ok(depths);
    }
    if sigma == 0.0 {
        depths.resize(count, depth_mean);
        return Ok(depths);
    }
    let normal = Normal::new(depth_mean, sigma).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    while depths.len() < count {
        let mut d = normal.sample(&mut rng);
        let mut tries = 0;
        while !(d > 0.0) {
            d = normal.sample(&mut rng);
            tries += 1;
            if tries > 1000 {
                d = depth_mean;
            }
        }
        depths.push(d);
    }
    Ok(depths)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidancePoint {
    pub position: Pixel,
    pub clipped: bool,
    /// Depth the point was reprojected from; `None` for the visual point itself.
    pub source_depth: Option<f64>,
}

/// Pulls a reprojection back to `d_max` along the ray from `x_v` when it lands too far away.
pub fn clip_guidance(x_v: &Pixel, x_d: &Pixel, d_max: f64) -> (Pixel, bool) {
    let offset = x_d - x_v;
    let dist = offset.norm();
    if dist > d_max {
        (x_v + offset * (d_max / dist), true)
    } else {
        (*x_d, false)
    }
}

pub fn sample_guidance_points(
    camera: &CameraModel,
    rel: &RelativePose,
    x_ref: &Pixel,
    x_v: &Pixel,
    depths: &[f64],
    config: &GuidanceConfig,
) -> Result<Vec<GuidancePoint>> {
    let mut points: Vec<GuidancePoint> = depths
        .iter()
        .filter_map(|&depth| {
            let x_d = reproject_with_depth(camera, rel, x_ref, depth).ok()?;
            let (position, clipped) = clip_guidance(x_v, &x_d, config.d_max);
            Some(GuidancePoint {
                position,
                clipped,
                source_depth: Some(depth),
            })
        })
        .collect();

    if config.epipolar_candidate && config.num_guidance > 1 {
        if let Some(p) = epipolar_candidate(camera, rel, x_ref, x_v, config) {
            points.push(p);
        }
    }

    if points.is_empty() {
        return Err(Error::NoGuidance);
    }
    Ok(points)
}

fn epipolar_candidate(
    camera: &CameraModel,
    rel: &RelativePose,
    x_ref: &Pixel,
    x_v: &Pixel,
    config: &GuidanceConfig,
) -> Option<GuidancePoint> {
    let line = epipolar_line(camera, rel, x_ref).ok()?;
    let nearest = line.closest_point(x_v);
    let depth = triangulate(camera, rel, x_ref, &nearest).ok()?;
    let (position, clipped) = clip_guidance(x_v, &nearest, config.d_max);
    Some(GuidancePoint {
        position,
        clipped,
        source_depth: Some(depth),
    })
}

/// Guidance distribution `q(x | x_v, x_g) = exp(-alpha * psi(x)) / z_norm`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceModel {
    pub x_v: Pixel,
    pub x_g: Pixel,
    /// Columns are the frame axes: axis 1 along `x_v -> x_g`, axis 2 perpendicular.
    pub frame_rotation: Matrix2<f64>,
    pub distance: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ratio: f64,
    pub z_norm: f64,
    pub clipped: bool,
}

pub fn calibrate_guidance(x_v: &Pixel, x_g: &GuidancePoint, config: &GuidanceConfig) -> Result<GuidanceModel> {
    let offset = x_g.position - x_v;
    let distance = offset.norm();
    if distance > config.d_max * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Input(format!(
            "guidance distance {distance} exceeds d_max {}",
            config.d_max
        )));
    }
    let distance = distance.min(config.d_max);
    let beta = beta_for_distance(config, distance);
    if !(beta > 0.5 && beta <= 1.0) {
        return Err(Error::Config(format!(
            "beta = {beta} outside (1/2, 1] at D = {distance}"
        )));
    }
    let axis1 = if distance > 1e-12 {
        offset / offset.norm()
    } else {
        Pixel::new(1.0, 0.0)
    };
    let axis2 = Pixel::new(-axis1.y, axis1.x);
    let frame_rotation = Matrix2::from_columns(&[axis1, axis2]);
    Ok(GuidanceModel {
        x_v: *x_v,
        x_g: x_g.position,
        frame_rotation,
        distance,
        alpha: config.alpha,
        beta,
        ratio: density_ratio(config, distance),
        z_norm: normalizer(config.alpha, beta, distance),
        clipped: x_g.clipped,
    })
}

/// Closed-form integral of `exp(-alpha * psi)` over the plane.
pub fn normalizer(alpha: f64, beta: f64, distance: f64) -> f64 {
    let axis2 = 2.0 / alpha;
    let near_tail = (-alpha * (1.0 - beta) * distance).exp() / alpha;
    let far_tail = (-alpha * beta * distance).exp() / alpha;
    let slope = alpha * (2.0 * beta - 1.0);
    let plateau = if slope * distance < 1e-12 {
        distance * (-alpha * (1.0 - beta) * distance).exp()
    } else {
        (-alpha * (1.0 - beta) * distance).exp() * -(-slope * distance).exp_m1() / slope
    };
    axis2 * (near_tail + plateau + far_tail)
}

impl GuidanceModel {
    /// Coordinates of `x` in the model frame, origin at `x_v`.
    pub fn to_frame(&self, x: &Pixel) -> Pixel {
        self.frame_rotation.transpose() * (x - self.x_v)
    }

    pub fn from_frame(&self, uv: &Pixel) -> Pixel {
        self.x_v + self.frame_rotation * uv
    }

    /// Distance energy `psi_d`.
    pub fn energy(&self, x: &Pixel) -> f64 {
        let uv = self.to_frame(x);
        let (u, v) = (uv.x, uv.y);
        // l1 distances to x_v = (0,0) and x_g = (D,0) in the frame
        let to_visual = u.abs() + v.abs();
        let to_guidance = (u - self.distance).abs() + v.abs();
        self.beta * to_visual + (1.0 - self.beta) * to_guidance
    }

    pub fn log_density(&self, x: &Pixel) -> f64 {
        -self.alpha * self.energy(x) - self.z_norm.ln()
    }

    pub fn density(&self, x: &Pixel) -> f64 {
        (-self.alpha * self.energy(x)).exp() / self.z_norm
    }
}

pub fn guidance_density(model: &GuidanceModel, x: &Pixel) -> f64 {
    model.density(x)
}

/// Valid patch-center region of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn contains(&self, x: &Pixel) -> bool {
        x.x >= self.min_x && x.x <= self.max_x && x.y >= self.min_y && x.y <= self.max_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    /// The visual point, sampled in addition to the lattice.
    pub center: Pixel,
    pub frame_rotation: Matrix2<f64>,
    /// `(n + 1)^2` lattice points, row-major over the second axis.
    pub points: Vec<Pixel>,
    pub in_bounds: Vec<bool>,
    /// Near-side half extent `l`.
    pub l: f64,
    pub h_extent: f64,
    pub w_extent: f64,
    pub subdivisions: usize,
}

impl SampleGrid {
    pub fn valid_points(&self) -> impl Iterator<Item = &Pixel> + '_ {
        self.points
            .iter()
            .zip(&self.in_bounds)
            .filter_map(|(p, &ok)| ok.then_some(p))
    }

    pub fn valid_count(&self) -> usize {
        self.in_bounds.iter().filter(|&&b| b).count()
    }

    /// Whether `x` lies inside the rectangular envelope spanned by the lattice.
    pub fn envelope_contains(&self, x: &Pixel) -> bool {
        let uv = self.frame_rotation.transpose() * (x - self.center);
        let eps = 1e-12;
        uv.x >= -self.l - eps
            && uv.x <= self.w_extent - self.l + eps
            && uv.y >= -self.l - eps
            && uv.y <= self.h_extent - self.l + eps
    }

    /// Corners of the envelope in image coordinates.
    pub fn envelope_corners(&self) -> [Pixel; 4] {
        self.corners(0.0, 0.0)
    }

    /// Half the lattice spacing along each frame axis.
    pub fn half_cell(&self) -> (f64, f64) {
        let n = self.subdivisions.max(1) as f64;
        (0.5 * self.w_extent / n, 0.5 * self.h_extent / n)
    }

    /// Whether `x` lies in the region the lattice covers as midpoint-rule
    /// cells: the envelope grown by half a lattice spacing on every side.
    pub fn support_contains(&self, x: &Pixel) -> bool {
        let (cu, cv) = self.half_cell();
        let uv = self.frame_rotation.transpose() * (x - self.center);
        uv.x >= -self.l - cu
            && uv.x <= self.w_extent - self.l + cu
            && uv.y >= -self.l - cv
            && uv.y <= self.h_extent - self.l + cv
    }

    pub fn support_corners(&self) -> [Pixel; 4] {
        let (cu, cv) = self.half_cell();
        self.corners(cu, cv)
    }

    fn corners(&self, grow_u: f64, grow_v: f64) -> [Pixel; 4] {
        let r = &self.frame_rotation;
        let (u0, u1) = (-self.l - grow_u, self.w_extent - self.l + grow_u);
        let (v0, v1) = (-self.l - grow_v, self.h_extent - self.l + grow_v);
        [
            self.center + r * Pixel::new(u0, v0),
            self.center + r * Pixel::new(u1, v0),
            self.center + r * Pixel::new(u1, v1),
            self.center + r * Pixel::new(u0, v1),
        ]
    }
}

/// Half-extents of the smallest frame-aligned box containing the level set
/// `psi <= l0`: returns `(l, W, H)`.
pub fn grid_extents(model: &GuidanceModel, config: &GuidanceConfig) -> Result<(f64, f64, f64)> {
    let beta = model.beta;
    let d = model.distance;
    let l = config.l0 - (1.0 - beta) * d;
    if !(l > 0.0) {
        return Err(Error::Config(format!("grid half-size l = {l} not positive")));
    }
    let h = 2.0 * l;
    let w = if d < config.l0 / beta {
        2.0 * config.l0
    } else {
        2.0 * beta * l / (2.0 * beta - 1.0)
    };
    Ok((l, w, h))
}

pub fn build_grid(model: &GuidanceModel, config: &GuidanceConfig, bounds: &Bounds) -> Result<SampleGrid> {
    let (l, w_extent, h_extent) = grid_extents(model, config)?;
    let n = config.n;
    let mut points = Vec::with_capacity((n + 1) * (n + 1));
    for h in 0..=n {
        for w in 0..=n {
            let uv = Pixel::new(w as f64 * w_extent / n as f64 - l, h as f64 * h_extent / n as f64 - l);
            points.push(model.from_frame(&uv));
        }
    }
    let in_bounds: Vec<bool> = points.iter().map(|p| bounds.contains(p)).collect();
    let valid = in_bounds.iter().filter(|&&b| b).count();
    if valid < 4 || !bounds.contains(&model.x_v) {
        return Err(Error::GridDegenerate { valid });
    }
    Ok(SampleGrid {
        center: model.x_v,
        frame_rotation: model.frame_rotation,
        points,
        in_bounds,
        l,
        h_extent,
        w_extent,
        subdivisions: n,
    })
}

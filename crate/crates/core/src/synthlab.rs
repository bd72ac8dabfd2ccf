//! Synthetic planar scenes with procedural textures, a degrading renderer,
//! an exhaustive reference matcher and a dense brute-force density oracle.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::energy::{combined_log_density, patch_rmse_multi, sample_intensity, ImagePlane};
use crate::error::{Error, Result};
use crate::fusion::{
    estimate_hypotheses, floor_covariance, CorrespondenceQuery, CorrespondenceUncertainty, EstimatorConfig, EIGEN_FLOOR,
};
use crate::geometry::{project, CameraModel, ImuSample, Pixel, Pose};

pub const DEFAULT_ORACLE_STEP: f64 = 0.05;
pub const ENVELOPE_PADDING: f64 = 1.0;
pub const DEFAULT_MATCH_STEP: f64 = 0.25;
pub const MATCH_PATCH_HALF: usize = 5;
const TIE_TOL: f64 = 1e-12;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed from a base seed and two indices.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextureLayer {
    /// Smooth lattice noise; `cell` is the coarsest lattice spacing in plane units.
    ValueNoise {
        seed: u64,
        cell: f64,
        amplitude: f64,
        octaves: u32,
    },
    /// Adds `contrast` on the side of the line the normal points to.
    Edge {
        point: [f64; 2],
        normal_angle: f64,
        contrast: f64,
    },
    /// Adds `contrast` inside the quadrant spanned by directions `angle` and `angle + pi/2`.
    Corner { apex: [f64; 2], angle: f64, contrast: f64 },
}

impl TextureLayer {
    fn value(&self, u: f64, v: f64) -> f64 {
        match *self {
            TextureLayer::ValueNoise {
                seed,
                cell,
                amplitude,
                octaves,
            } => {
                let mut total = 0.0;
                let mut norm = 0.0;
                let mut amp = 1.0;
                let mut size = cell;
                for o in 0..octaves.max(1) {
                    total += amp * lattice_noise(seed.wrapping_add(o as u64), u / size, v / size);
                    norm += amp;
                    amp *= 0.5;
                    size *= 0.5;
                }
                amplitude * total / norm
            }
            TextureLayer::Edge {
                point,
                normal_angle,
                contrast,
            } => {
                let s = (u - point[0]) * normal_angle.cos() + (v - point[1]) * normal_angle.sin();
                if s >= 0.0 {
                    contrast
                } else {
                    0.0
                }
            }
            TextureLayer::Corner { apex, angle, contrast } => {
                let (du, dv) = (u - apex[0], v - apex[1]);
                let a = du * angle.cos() + dv * angle.sin();
                let b = -du * angle.sin() + dv * angle.cos();
                if a >= 0.0 && b >= 0.0 {
                    contrast
                } else {
                    0.0
                }
            }
        }
    }
}

fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = mix_seed(seed, ix as u64, iy as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lattice_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (quintic(x - fx), quintic(y - fy));
    let v00 = lattice_value(seed, ix, iy);
    let v10 = lattice_value(seed, ix + 1, iy);
    let v01 = lattice_value(seed, ix, iy + 1);
    let v11 = lattice_value(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * tx;
    let bottom = v01 + (v11 - v01) * tx;
    top + (bottom - top) * ty
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: f64,
    pub layers: Vec<TextureLayer>,
}

impl Texture {
    /// Intensity at plane coordinates, clamped to `[0, 1]`.
    pub fn intensity(&self, u: f64, v: f64) -> f64 {
        let sum: f64 = self.layers.iter().map(|l| l.value(u, v)).sum();
        (self.base + sum).clamp(0.0, 1.0)
    }
}

/// A textured plane through `origin` spanned by orthonormal axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub origin: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
}

impl Plane {
    /// Plane `z = depth` with texture axes along world x and y.
    pub fn fronto_parallel(depth: f64) -> Self {
        Plane {
            origin: Vector3::new(0.0, 0.0, depth),
            u_axis: Vector3::x(),
            v_axis: Vector3::y(),
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u_axis.cross(&self.v_axis)
    }

    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.origin + self.u_axis * u + self.v_axis * v
    }

    pub fn coordinates(&self, x: &Vector3<f64>) -> (f64, f64) {
        let d = x - self.origin;
        (d.dot(&self.u_axis), d.dot(&self.v_axis))
    }

    /// Ray parameter of the intersection with `origin + s * dir`, if in front.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let s = n.dot(&(self.origin - origin)) / denom;
        (s > 0.0).then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub camera: CameraModel,
    pub plane: Plane,
    pub texture: Texture,
    /// Feature points in world coordinates.
    pub features: Vec<Vector3<f64>>,
    pub poses: Vec<Pose>,
    pub timestamps: Vec<f64>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.poses.is_empty() {
            return Err(Error::Input("scene has no poses".into()));
        }
        if self.timestamps.len() != self.poses.len() {
            return Err(Error::Input(format!(
                "{} timestamps for {} poses",
                self.timestamps.len(),
                self.poses.len()
            )));
        }
        Ok(())
    }

    /// Plane point seen through `pixel` from pose `pose_index`.
    pub fn plane_point(&self, pose_index: usize, pixel: &Pixel) -> Result<Vector3<f64>> {
        let pose = self.pose(pose_index)?;
        let dir = pose.rotation * self.camera.ray(pixel);
        let s = self
            .plane
            .intersect(&pose.position, &dir)
            .ok_or_else(|| Error::Domain("ray misses the plane".into()))?;
        Ok(pose.position + dir * s)
    }

    pub fn pose(&self, pose_index: usize) -> Result<&Pose> {
        self.poses
            .get(pose_index)
            .ok_or_else(|| Error::Input(format!("pose index {pose_index} out of range")))
    }

    /// Depth of a world point in the camera at `pose_index`.
    pub fn depth_in(&self, pose_index: usize, world: &Vector3<f64>) -> Result<f64> {
        let pose = self.pose(pose_index)?;
        Ok((pose.rotation.inverse() * (world - pose.position)).z)
    }

    /// True projection of feature `feature` if visible and inside the image.
    pub fn observe(&self, pose_index: usize, feature: usize) -> Result<Option<Pixel>> {
        let pose = self.pose(pose_index)?;
        let world = self
            .features
            .get(feature)
            .ok_or_else(|| Error::Input(format!("feature {feature} out of range")))?;
        let cam = pose.rotation.inverse() * (world - pose.position);
        let Ok(px) = project(&self.camera, &cam) else {
            return Ok(None);
        };
        let (w, h) = ((self.camera.width - 1) as f64, (self.camera.height - 1) as f64);
        if !(px.x >= 0.0 && px.x <= w && px.y >= 0.0 && px.y <= h) {
            return Ok(None);
        }
        let dir = world - pose.position;
        let dist = dir.norm();
        if let Some(s) = self.plane.intersect(&pose.position, &(dir / dist)) {
            if s < dist * (1.0 - 1e-9) {
                return Ok(None);
            }
        }
        Ok(Some(px))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationParams {
    pub gaussian_blur_sigma: f64,
    pub intensity_noise_sigma: f64,
    pub motion_blur_length: f64,
    /// Direction of the motion blur, radians from the image x axis.
    pub motion_blur_angle: f64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.gaussian_blur_sigma,
            self.intensity_noise_sigma,
            self.motion_blur_length,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !self.motion_blur_angle.is_finite() {
            return Err(Error::Input(format!("invalid degradation parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: ImagePlane,
    /// `(feature index, true pixel)` for every visible feature.
    pub correspondences: Vec<(usize, Pixel)>,
}

/// Subsamples per pixel axis.
pub const SUPERSAMPLING: usize = 3;

pub fn render_view(scene: &SyntheticScene, pose_index: usize, degradation: &DegradationParams) -> Result<RenderedView> {
    scene.validate()?;
    degradation.validate()?;
    let pose = scene.pose(pose_index)?;
    let (w, h) = (scene.camera.width as usize, scene.camera.height as usize);
    let ss = SUPERSAMPLING;
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = Pixel::new(
                        x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5,
                        y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5,
                    );
                    let dir = pose.rotation * scene.camera.ray(&px);
                    acc += match scene.plane.intersect(&pose.position, &dir) {
                        Some(s) => {
                            let (u, v) = scene.plane.coordinates(&(pose.position + dir * s));
                            scene.texture.intensity(u, v)
                        }
                        None => 0.0,
                    };
                }
            }
            pixels.push(acc / (ss * ss) as f64);
        }
    }
    let mut image = ImagePlane::new(w, h, pixels)?;
    if degradation.gaussian_blur_sigma > 0.0 {
        image = gaussian_blur(&image, degradation.gaussian_blur_sigma);
    }
    if degradation.motion_blur_length > 0.0 {
        image = motion_blur(&image, degradation.motion_blur_length, degradation.motion_blur_angle);
    }
    if degradation.intensity_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, degradation.intensity_noise_sigma).map_err(|e| Error::Input(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, pose_index as u64, 0x006e_6f69_7365));
        for v in image.intensities.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let mut correspondences = Vec::new();
    for i in 0..scene.features.len() {
        if let Some(px) = scene.observe(pose_index, i)? {
            correspondences.push((i, px));
        }
    }
    Ok(RenderedView { image, correspondences })
}

/// Separable gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &ImagePlane, sigma: f64) -> ImagePlane {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h) = (image.width as isize, image.height as isize);
    let mut tmp = vec![0.0; image.intensities.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, i) in kernel.iter().zip(-radius..=radius) {
                acc += k * image.at((x + i).clamp(0, w - 1) as usize, y as usize);
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; tmp.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, i) in kernel.iter().zip(-radius..=radius) {
                acc += k * tmp[((y + i).clamp(0, h - 1) * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc.clamp(0.0, 1.0);
        }
    }
    ImagePlane {
        width: image.width,
        height: image.height,
        intensities: out,
    }
}

/// Averages bilinear samples along a centered segment of the given length.
pub fn motion_blur(image: &ImagePlane, length: f64, angle: f64) -> ImagePlane {
    let taps = (length.ceil() as usize + 1).max(2);
    let dir = Pixel::new(angle.cos(), angle.sin());
    let (max_x, max_y) = ((image.width - 1) as f64, (image.height - 1) as f64);
    let mut out = Vec::with_capacity(image.intensities.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let mut acc = 0.0;
            for t in 0..taps {
                let s = length * (t as f64 / (taps - 1) as f64 - 0.5);
                let p = Pixel::new(x as f64, y as f64) + dir * s;
                let p = Pixel::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y));
                acc += sample_intensity(image, &p).unwrap_or(0.0);
            }
            out.push((acc / taps as f64).clamp(0.0, 1.0));
        }
    }
    ImagePlane {
        width: image.width,
        height: image.height,
        intensities: out,
    }
}

/// Exhaustive patch-RMSE search over a square window centered on `x_ref`.
pub fn visual_match(
    ref_image: &ImagePlane,
    tgt_image: &ImagePlane,
    x_ref: &Pixel,
    search_radius: f64,
    step: f64,
) -> Result<Pixel> {
    if !(step > 0.0 && search_radius >= 0.0 && step.is_finite() && search_radius.is_finite()) {
        return Err(Error::Input(format!(
            "invalid search radius {search_radius} or step {step}"
        )));
    }
    let half = MATCH_PATCH_HALF;
    let ref_bounds = ref_image.patch_bounds(half);
    if !ref_bounds.contains(x_ref) {
        return Err(Error::PatchOutOfBounds { x: x_ref.x, y: x_ref.y });
    }
    let m = (search_radius / step + 1e-9).floor() as i64;
    let reach = m as f64 * step;
    let tgt_bounds = tgt_image.patch_bounds(half);
    for corner in [Pixel::new(-reach, -reach), Pixel::new(reach, reach)] {
        let c = x_ref + corner;
        if !tgt_bounds.contains(&c) {
            return Err(Error::PatchOutOfBounds { x: c.x, y: c.y });
        }
    }
    let refs = [*x_ref];
    let mut best: Option<(f64, f64, Pixel)> = None;
    for j in -m..=m {
        for i in -m..=m {
            let d = Pixel::new(i as f64 * step, j as f64 * step);
            let e = patch_rmse_multi(ref_image, tgt_image, &refs, &(x_ref + d), half)?;
            let r2 = d.norm_squared();
            let better = match &best {
                None => true,
                Some((be, br2, bd)) => {
                    if e < be - TIE_TOL {
                        true
                    } else if e > be + TIE_TOL {
                        false
                    } else if r2 != *br2 {
                        r2 < *br2
                    } else {
                        (d.x, d.y) < (bd.x, bd.y)
                    }
                }
            };
            if better {
                best = Some((e, r2, d));
            }
        }
    }
    let (_, _, d) = best.expect("window has at least one candidate");
    Ok(x_ref + d)
}

/// Mean and covariance of a log-density evaluated at cell centers of a regular
/// grid over `[min, max]`. Points where `log_density` is `None` carry no mass.
pub fn dense_moments(
    min: &Pixel,
    max: &Pixel,
    step: f64,
    log_density: impl Fn(&Pixel) -> Option<f64>,
) -> Result<(Pixel, Matrix2<f64>)> {
    if !(step > 0.0) || !(max.x > min.x && max.y > min.y) {
        return Err(Error::Input("empty dense region".into()));
    }
    let nx = ((max.x - min.x) / step).ceil() as usize;
    let ny = ((max.y - min.y) / step).ceil() as usize;
    let mut samples = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let p = Pixel::new(min.x + (i as f64 + 0.5) * step, min.y + (j as f64 + 0.5) * step);
            if let Some(l) = log_density(&p) {
                if !l.is_nan() {
                    samples.push((p, l));
                }
            }
        }
    }
    let top = samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::MarginalizationFailed("no dense mass".into()));
    }
    let mut total = 0.0;
    let mut mean = Pixel::zeros();
    for (p, l) in &samples {
        let w = (l - top).exp();
        total += w;
        mean += p * w;
    }
    mean /= total;
    let mut cov = Matrix2::zeros();
    for (p, l) in &samples {
        let d = p - mean;
        cov += d * d.transpose() * ((l - top).exp() / total);
    }
    Ok((mean, cov))
}

/// Evaluates the same combined density the sparse pipeline samples, on a dense
/// grid over the union of hypothesis supports (see
/// [`SampleGrid::support_contains`](crate::guidance::SampleGrid::support_contains)),
/// and integrates it directly.
pub fn dense_oracle(
    query: &CorrespondenceQuery<'_>,
    config: &EstimatorConfig,
    grid_step: f64,
) -> Result<CorrespondenceUncertainty> {
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return Err(Error::Input(format!(
            "oracle grid step {grid_step} must be in (0, 0.1]"
        )));
    }
    let (mode, hyps) = estimate_hypotheses(query, config)?;
    let refs: Vec<Pixel> = if query.ref_patches.is_empty() {
        vec![query.x_ref]
    } else {
        query.ref_patches.clone()
    };
    let mut min = Pixel::new(f64::INFINITY, f64::INFINITY);
    let mut max = Pixel::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for h in &hyps {
        for c in h.field.grid.support_corners() {
            min = min.inf(&c);
            max = max.sup(&c);
        }
    }
    min -= Pixel::repeat(ENVELOPE_PADDING);
    max += Pixel::repeat(ENVELOPE_PADDING);
    let bounds = query.tgt_image.patch_bounds(config.energy.patch_half);
    let (mean, cov) = dense_moments(&min, &max, grid_step, |x| {
        let inside: Vec<_> = hyps.iter().filter(|h| h.field.grid.support_contains(x)).collect();
        if inside.is_empty() || !bounds.contains(x) {
            return None;
        }
        let e = patch_rmse_multi(query.ref_image, query.tgt_image, &refs, x, config.energy.patch_half).ok()?;
        let logs: Vec<f64> = inside
            .iter()
            .map(|h| match &h.scaled {
                Some(s) => combined_log_density(s, &h.model, h.field.error_at_xv, h.weights.lambda, x, e),
                None => h.model.log_density(x),
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    })?;
    Ok(CorrespondenceUncertainty {
        mean,
        covariance: floor_covariance(&cov, EIGEN_FLOOR),
        visual_point: query.x_v,
        hypotheses_used: hyps.len(),
        mode,
        diagnostics: hyps.into_iter().map(|h| h.diagnostics).collect(),
    })
}

/// Constant-velocity, constant-rate camera motion starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub start: Pose,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Body-frame angular rate, rad/s.
    pub angular_velocity: Vector3<f64>,
}

impl Motion {
    pub fn pose_at(&self, t: f64) -> Pose {
        Pose {
            rotation: self.start.rotation * Rotation3::new(self.angular_velocity * t),
            position: self.start.position + self.velocity * t,
        }
    }

    /// Ideal IMU readings at `rate` Hz over `[0, duration]`.
    pub fn imu_samples(&self, duration: f64, rate: f64, gravity: &Vector3<f64>) -> Vec<ImuSample> {
        let count = (duration * rate).round() as usize;
        (0..=count)
            .map(|i| {
                let t = i as f64 / rate;
                let pose = self.pose_at(t);
                ImuSample {
                    timestamp: t,
                    angular_velocity: self.angular_velocity,
                    acceleration: pose.rotation.inverse() * (-gravity),
                }
            })
            .collect()
    }
}

/// A named scene recipe with its degradation and matcher settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub scene: SyntheticScene,
    pub motion: Motion,
    pub degradation: DegradationParams,
    pub search_radius: f64,
}

pub const SCENARIOS: [&str; 3] = ["pure-translation", "blurred-edge", "rotation"];

pub const SCENE_FX: f64 = 120.0;
pub const SCENE_WIDTH: u32 = 160;
pub const SCENE_HEIGHT: u32 = 120;
pub const SCENE_DEPTH: f64 = 2.0;
pub const FRAME_INTERVAL: f64 = 0.05;
pub const SCENE_FRAMES: usize = 3;

pub fn scene_camera() -> CameraModel {
    CameraModel {
        fx: SCENE_FX,
        fy: SCENE_FX,
        cx: (SCENE_WIDTH - 1) as f64 / 2.0,
        cy: (SCENE_HEIGHT - 1) as f64 / 2.0,
        width: SCENE_WIDTH,
        height: SCENE_HEIGHT,
    }
}

pub fn scenario(name: &str, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7363_656e, 0));
    let camera = scene_camera();
    let plane = Plane::fronto_parallel(SCENE_DEPTH);
    let px_to_m = SCENE_DEPTH / SCENE_FX;
    let heading = rng.random_range(0.0..2.0 * PI);
    let speed_px = rng.random_range(1.5..2.5);
    let lateral = Vector3::new(heading.cos(), heading.sin(), 0.0) * speed_px * px_to_m / FRAME_INTERVAL;

    let (texture, velocity, angular_velocity, degradation, pixels, search_radius) = match name {
        "pure-translation" => {
            let texture = Texture {
                base: 0.5,
                layers: vec![TextureLayer::ValueNoise {
                    seed: rng.random(),
                    cell: 6.0 * px_to_m,
                    amplitude: 0.35,
                    octaves: 3,
                }],
            };
            let pixels = feature_grid(&camera, 22.0, 3, 2);
            (
                texture,
                lateral,
                Vector3::zeros(),
                DegradationParams::default(),
                pixels,
                4.0,
            )
        }
        "rotation" => {
            let texture = Texture {
                base: 0.5,
                layers: vec![TextureLayer::ValueNoise {
                    seed: rng.random(),
                    cell: 6.0 * px_to_m,
                    amplitude: 0.35,
                    octaves: 3,
                }],
            };
            let rate = Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.2..0.2),
            );
            let degradation = DegradationParams {
                intensity_noise_sigma: 0.01,
                ..Default::default()
            };
            let pixels = feature_grid(&camera, 22.0, 3, 2);
            (texture, lateral, rate, degradation, pixels, 5.0)
        }
        "blurred-edge" => {
            let edge_angle = rng.random_range(0.0..PI);
            let texture = Texture {
                base: 0.3,
                layers: vec![
                    TextureLayer::Edge {
                        point: [0.0, 0.0],
                        normal_angle: edge_angle + PI / 2.0,
                        contrast: 0.4,
                    },
                    TextureLayer::ValueNoise {
                        seed: rng.random(),
                        cell: 4.0 * px_to_m,
                        amplitude: 0.04,
                        octaves: 2,
                    },
                ],
            };
            let degradation = DegradationParams {
                gaussian_blur_sigma: 1.5,
                intensity_noise_sigma: 0.02,
                ..Default::default()
            };
            let along = Pixel::new(edge_angle.cos(), edge_angle.sin());
            let center = Pixel::new(camera.cx, camera.cy);
            let pixels = [-24.0, -12.0, 0.0, 12.0, 24.0]
                .iter()
                .map(|s| center + along * *s)
                .collect();
            (texture, lateral, Vector3::zeros(), degradation, pixels, 4.0)
        }
        other => {
            return Err(Error::Input(format!(
                "unknown scenario '{other}'; available: {}",
                SCENARIOS.join(", ")
            )))
        }
    };

    let motion = Motion {
        start: Pose::identity(),
        velocity,
        angular_velocity,
    };
    let timestamps: Vec<f64> = (0..SCENE_FRAMES).map(|i| i as f64 * FRAME_INTERVAL).collect();
    let poses = timestamps.iter().map(|t| motion.pose_at(*t)).collect();
    let mut scene = SyntheticScene {
        camera,
        plane,
        texture,
        features: Vec::new(),
        poses,
        timestamps,
        seed,
    };
    let features = pixels
        .iter()
        .map(|p: &Pixel| scene.plane_point(0, p))
        .collect::<Result<Vec<_>>>()?;
    scene.features = features;
    Ok(Scenario {
        name: name.to_string(),
        scene,
        motion,
        degradation,
        search_radius,
    })
}

fn feature_grid(camera: &CameraModel, spacing: f64, half_x: i32, half_y: i32) -> Vec<Pixel> {
    let mut pts = Vec::new();
    for j in -half_y..=half_y {
        for i in -half_x..=half_x {
            pts.push(Pixel::new(
                camera.cx + i as f64 * spacing,
                camera.cy + j as f64 * spacing,
            ));
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_pose;

    fn lateral_scene(baseline: f64, texture: Texture) -> SyntheticScene {
        let camera = scene_camera();
        let feature = Plane::fronto_parallel(SCENE_DEPTH).point(0.05, -0.03);
        SyntheticScene {
            camera,
            plane: Plane::fronto_parallel(SCENE_DEPTH),
            texture,
            features: vec![feature],
            poses: vec![
                Pose::identity(),
                Pose {
                    rotation: Rotation3::identity(),
                    position: Vector3::new(baseline, 0.0, 0.0),
                },
            ],
            timestamps: vec![0.0, 0.05],
            seed: 9,
        }
    }

    fn noise_texture(seed: u64) -> Texture {
        Texture {
            base: 0.5,
            layers: vec![TextureLayer::ValueNoise {
                seed,
                cell: 0.1,
                amplitude: 0.35,
                octaves: 3,
            }],
        }
    }

    #[test]
    fn identical_poses_render_identically() {
        let mut scene = lateral_scene(0.0, noise_texture(1));
        scene.poses[1] = scene.poses[0];
        let a = render_view(&scene, 0, &DegradationParams::default()).unwrap();
        let b = render_view(&scene, 1, &DegradationParams::default()).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.correspondences, b.correspondences);
    }

    #[test]
    fn lateral_baseline_disparity() {
        // fx * b / d = 120 * 0.05 / 2 = 3 px
        let scene = lateral_scene(0.05, noise_texture(2));
        let a = render_view(&scene, 0, &DegradationParams::default()).unwrap();
        let b = render_view(&scene, 1, &DegradationParams::default()).unwrap();
        let d = b.correspondences[0].1 - a.correspondences[0].1;
        assert!((d.x + 3.0).abs() < 1e-9 && d.y.abs() < 1e-9, "{d:?}");

        // Whole patches shift by the same disparity.
        let mut worst: f64 = 0.0;
        for y in 20..100 {
            for x in 20..140 {
                worst = worst.max((a.image.at(x, y) - b.image.at(x - 3, y)).abs());
            }
        }
        assert!(worst < 1e-3, "max diff {worst}");
    }

    #[test]
    fn noise_statistics() {
        let mut scene = lateral_scene(
            0.0,
            Texture {
                base: 0.5,
                layers: vec![],
            },
        );
        scene.poses[1] = scene.poses[0];
        let deg = DegradationParams {
            intensity_noise_sigma: 0.05,
            ..Default::default()
        };
        let a = render_view(&scene, 0, &deg).unwrap();
        let b = render_view(&scene, 1, &deg).unwrap();
        let diffs: Vec<f64> = a
            .image
            .intensities
            .iter()
            .zip(&b.image.intensities)
            .map(|(x, y)| x - y)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = 0.05 * 2f64.sqrt();
        assert!((std - expected).abs() / expected < 0.03, "std {std}");
    }

    #[test]
    fn blur_preserves_constant_and_mass() {
        let img = ImagePlane::filled(20, 20, 0.4);
        let g = gaussian_blur(&img, 1.2);
        assert!(g.intensities.iter().all(|v| (v - 0.4).abs() < 1e-12));
        let m = motion_blur(&img, 3.0, 0.7);
        assert!(m.intensities.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn match_recovers_translation() {
        let scene = lateral_scene(0.05, noise_texture(3));
        let a = render_view(&scene, 0, &DegradationParams::default()).unwrap();
        let b = render_view(&scene, 1, &DegradationParams::default()).unwrap();
        let x_ref = a.correspondences[0].1;
        let truth = b.correspondences[0].1;
        let m = visual_match(&a.image, &b.image, &x_ref, 4.0, DEFAULT_MATCH_STEP).unwrap();
        assert!(
            (m - truth).abs().max() <= DEFAULT_MATCH_STEP / 2.0 + 1e-9,
            "{m:?} vs {truth:?}"
        );
    }

    #[test]
    fn match_identical_images_returns_reference() {
        let scene = lateral_scene(
            0.0,
            Texture {
                base: 0.5,
                layers: vec![],
            },
        );
        let a = render_view(&scene, 0, &DegradationParams::default()).unwrap();
        let x = Pixel::new(40.3, 50.7);
        assert_eq!(visual_match(&a.image, &a.image, &x, 3.0, 0.25).unwrap(), x);
    }

    #[test]
    fn match_window_out_of_bounds() {
        let img = ImagePlane::filled(40, 40, 0.5);
        assert!(matches!(
            visual_match(&img, &img, &Pixel::new(8.0, 20.0), 4.0, 0.25),
            Err(Error::PatchOutOfBounds { .. })
        ));
    }

    #[test]
    fn blurred_edge_drifts_along_edge() {
        let mut along_total = 0.0;
        let mut across_total = 0.0;
        for seed in 0..6 {
            let sc = scenario("blurred-edge", seed).unwrap();
            let a = render_view(&sc.scene, 0, &sc.degradation).unwrap();
            let b = render_view(&sc.scene, 1, &sc.degradation).unwrap();
            let TextureLayer::Edge { normal_angle, .. } = sc.scene.texture.layers[0] else {
                unreachable!()
            };
            let normal = Pixel::new(normal_angle.cos(), normal_angle.sin());
            for ((_, xr), (_, truth)) in a.correspondences.iter().zip(&b.correspondences) {
                let m = visual_match(&a.image, &b.image, xr, sc.search_radius, DEFAULT_MATCH_STEP).unwrap();
                let err = m - truth;
                let across = err.dot(&normal).abs();
                along_total += (err.norm_squared() - across * across).sqrt();
                across_total += across;
            }
        }
        assert!(along_total > across_total, "along {along_total} across {across_total}");
    }

    #[test]
    fn scenarios_are_deterministic_and_visible() {
        for name in SCENARIOS {
            let a = scenario(name, 42).unwrap();
            assert_eq!(a, scenario(name, 42).unwrap());
            for pose in 0..a.scene.poses.len() {
                for f in 0..a.scene.features.len() {
                    let px = a.scene.observe(pose, f).unwrap();
                    assert!(px.is_some(), "{name}: feature {f} hidden in pose {pose}");
                    assert!(a.scene.depth_in(pose, &a.scene.features[f]).unwrap() > 0.0);
                }
            }
        }
        let err = scenario("spiral", 1).unwrap_err().to_string();
        assert!(err.contains("blurred-edge"));
    }

    #[test]
    fn imu_matches_motion() {
        let sc = scenario("rotation", 5).unwrap();
        let g = Vector3::new(0.0, 0.0, -9.81);
        let samples = sc.motion.imu_samples(0.1, 200.0, &g);
        let state = crate::geometry::ImuState {
            velocity: sc.motion.velocity,
            ..crate::geometry::ImuState::at_rest(sc.motion.start)
        };
        let poses = crate::geometry::integrate_imu(&samples, &state, &g).unwrap();
        let end = sc.motion.pose_at(0.1);
        let last = poses.last().unwrap();
        assert!((last.position - end.position).norm() < 1e-9);
        assert!(last.rotation.angle_to(&end.rotation) < 1e-9);
    }

    #[test]
    fn dense_moments_uniform_square() {
        let a = 2.0;
        let (mean, cov) = dense_moments(&Pixel::new(-a, -a), &Pixel::new(a, a), 0.05 * a, |_| Some(0.0)).unwrap();
        assert!(mean.norm() < 1e-9);
        let expect = a * a / 3.0;
        assert!((cov[(0, 0)] - expect).abs() / expect < 0.02);
        assert!((cov[(1, 1)] - expect).abs() / expect < 0.02);
        assert!(cov[(0, 1)].abs() < 1e-9);
    }

    #[test]
    fn dense_moments_spike() {
        let spike = Pixel::new(0.525, -0.275);
        let (mean, _) = dense_moments(&Pixel::new(-1.0, -1.0), &Pixel::new(1.0, 1.0), 0.05, |p| {
            Some(-1e4 * (p - spike).norm_squared())
        })
        .unwrap();
        assert!((mean - spike).norm() < 1e-6, "{mean:?}");
    }

    #[test]
    fn dense_oracle_tracks_sparse_estimate() {
        let sc = scenario("pure-translation", 11).unwrap();
        let a = render_view(&sc.scene, 0, &sc.degradation).unwrap();
        let b = render_view(&sc.scene, 1, &sc.degradation).unwrap();
        let rel = relative_pose(&sc.scene.poses[0], &sc.scene.poses[1]);
        let (f, x_ref) = a.correspondences[3];
        let x_v = visual_match(&a.image, &b.image, &x_ref, sc.search_radius, DEFAULT_MATCH_STEP).unwrap();
        let query = CorrespondenceQuery {
            camera: sc.scene.camera,
            rel,
            x_ref,
            ref_patches: vec![],
            x_v,
            ref_image: &a.image,
            tgt_image: &b.image,
            depth: Some(sc.scene.depth_in(0, &sc.scene.features[f]).unwrap()),
            seed: 1,
        };
        let cfg = EstimatorConfig::default();
        let sparse = crate::fusion::estimate_correspondence(&query, &cfg).unwrap();
        let dense = dense_oracle(&query, &cfg, DEFAULT_ORACLE_STEP).unwrap();
        assert!(
            (sparse.mean - dense.mean).norm() < 0.15,
            "{:?} vs {:?}",
            sparse.mean,
            dense.mean
        );
        assert!(dense_oracle(&query, &cfg, 0.2).is_err());
    }
}

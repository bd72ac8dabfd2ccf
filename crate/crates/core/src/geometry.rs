//! Pinhole projection, rigid transforms, two-view utilities and short-horizon
//! IMU integration.
//!
//! Poses are camera-to-world: a point `X_c` in camera coordinates maps to
//! `R * X_c + p` in the world frame.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Pixel = Vector2<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let camera = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Input(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx) && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::Input(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Bearing vector with unit depth for a pixel.
    pub fn ray(&self, pixel: &Pixel) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation3::identity(),
            position: Vector3::zeros(),
        }
    }

    /// Builds a pose from a raw matrix, rejecting anything that is not a proper rotation.
    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Pose {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            position,
        })
    }

    pub fn from_quaternion(q: [f64; 4], position: Vector3<f64>) -> Result<Self> {
        let [qx, qy, qz, qw] = q;
        let quat = nalgebra::Quaternion::new(qw, qx, qy, qz);
        let norm = quat.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::Input("zero-norm quaternion".into()));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Pose {
            rotation: unit.to_rotation_matrix(),
            position,
        })
    }

    /// Quaternion as `[qx, qy, qz, qw]`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        [q.i, q.j, q.k, q.w]
    }
}

/// Maps reference-camera coordinates into target-camera coordinates:
/// `X_tgt = rotation * X_ref + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        RelativePose {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(RelativePose {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        RelativePose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies `self` first, then `next`.
    pub fn then(&self, next: &RelativePose) -> Self {
        let mut rotation = next.rotation * self.rotation;
        rotation.renormalize();
        RelativePose {
            rotation,
            translation: next.rotation * self.translation + next.translation,
        }
    }
}

fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !(err < ORTHONORMAL_TOL && (det - 1.0).abs() < ORTHONORMAL_TOL) {
        return Err(Error::Input(format!(
            "rotation not orthonormal (|RtR-I|={err:e}, det={det})"
        )));
    }
    Ok(())
}

pub fn project(camera: &CameraModel, point: &Vector3<f64>) -> Result<Pixel> {
    if !(point.z > 0.0) {
        return Err(Error::Domain(format!("point depth {} is not positive", point.z)));
    }
    Ok(Pixel::new(
        camera.fx * point.x / point.z + camera.cx,
        camera.fy * point.y / point.z + camera.cy,
    ))
}

pub fn backproject(camera: &CameraModel, pixel: &Pixel, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::Domain(format!("depth {depth} is not positive")));
    }
    Ok(camera.ray(pixel) * depth)
}

pub fn relative_pose(reference: &Pose, target: &Pose) -> RelativePose {
    let rt = target.rotation.inverse();
    let mut rotation = rt * reference.rotation;
    rotation.renormalize();
    RelativePose {
        rotation,
        translation: rt * (reference.position - target.position),
    }
}

/// Reprojects a reference pixel at the given depth into the target image.
pub fn reproject_with_depth(camera: &CameraModel, rel: &RelativePose, x_ref: &Pixel, depth: f64) -> Result<Pixel> {
    let point = rel.transform(&backproject(camera, x_ref, depth)?);
    if !(point.z > 0.0) {
        return Err(Error::GuidanceUnavailable);
    }
    project(camera, &point)
}

/// Midpoint triangulation; returns the depth of the midpoint in the reference frame.
pub fn triangulate(camera: &CameraModel, rel: &RelativePose, x_ref: &Pixel, x_tgt: &Pixel) -> Result<f64> {
    let baseline = rel.translation.norm();
    if baseline < 1e-9 {
        return Err(Error::TriangulationDegenerate(format!(
            "baseline {baseline:e} too small"
        )));
    }
    let inv = rel.rotation.inverse();
    let f1 = camera.ray(x_ref);
    let f2 = inv * camera.ray(x_tgt);
    // target camera center expressed in the reference frame
    let c2 = -(inv * rel.translation);

    // minimize |s f1 - (c2 + u f2)|
    let a = f1.dot(&f1);
    let b = f1.dot(&f2);
    let c = f2.dot(&f2);
    let d = f1.dot(&c2);
    let e = f2.dot(&c2);
    let denom = a * c - b * b;
    if denom < 1e-12 * a * c {
        return Err(Error::TriangulationDegenerate("rays are parallel".into()));
    }
    let s = (d * c - b * e) / denom;
    let u = (d * b - a * e) / denom;
    let midpoint = 0.5 * (f1 * s + c2 + f2 * u);
    if !(midpoint.z > 0.0 && midpoint.z.is_finite()) {
        return Err(Error::TriangulationDegenerate(format!(
            "midpoint depth {} not positive",
            midpoint.z
        )));
    }
    Ok(midpoint.z)
}

/// Epipolar line in the target image, oriented towards decreasing depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpipolarLine {
    pub point: Pixel,
    pub direction: Pixel,
}

impl EpipolarLine {
    pub fn distance(&self, x: &Pixel) -> f64 {
        let d = x - self.point;
        (d.x * self.direction.y - d.y * self.direction.x).abs()
    }

    pub fn closest_point(&self, x: &Pixel) -> Pixel {
        self.point + self.direction * (x - self.point).dot(&self.direction)
    }
}

pub fn epipolar_line(camera: &CameraModel, rel: &RelativePose, x_ref: &Pixel) -> Result<EpipolarLine> {
    let t = rel.translation;
    if t.norm() < 1e-12 {
        return Err(Error::EpipolarDegenerate("zero baseline".into()));
    }
    let a = rel.rotation * camera.ray(x_ref);
    // d/dd of the reprojection keeps a constant direction for every valid depth
    let grad = Pixel::new(camera.fx * (a.x * t.z - t.x * a.z), camera.fy * (a.y * t.z - t.y * a.z));
    let norm = grad.norm();
    if norm < 1e-12 * (1.0 + t.norm()) * camera.fx.max(camera.fy) {
        return Err(Error::EpipolarDegenerate(
            "reference ray passes through the target camera center".into(),
        ));
    }
    let direction = -grad / norm;
    let point = if a.z > 1e-12 {
        project(camera, &a)?
    } else if t.z > 1e-12 {
        project(camera, &t)?
    } else {
        return Err(Error::EpipolarDegenerate(
            "no reprojection lies in front of the target camera".into(),
        ));
    };
    Ok(EpipolarLine { point, direction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    pub angular_velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

impl ImuState {
    pub fn at_rest(pose: Pose) -> Self {
        ImuState {
            pose,
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}

/// Midpoint-rule strapdown integration. Returns one pose per sample; the first
/// is the initial pose.
pub fn integrate_imu(samples: &[ImuSample], initial: &ImuState, gravity: &Vector3<f64>) -> Result<Vec<Pose>> {
    if samples.len() < 2 {
        return Err(Error::Input(format!(
            "need at least 2 IMU samples, got {}",
            samples.len()
        )));
    }
    if let Some(i) = samples.windows(2).position(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(Error::Input(format!(
            "IMU timestamps not strictly increasing at sample {}",
            i + 1
        )));
    }

    let mut rotation = initial.pose.rotation;
    let mut position = initial.pose.position;
    let mut velocity = initial.velocity;
    let mut poses = Vec::with_capacity(samples.len());
    poses.push(Pose { rotation, position });

    for w in samples.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        let dt = s1.timestamp - s0.timestamp;
        let omega = 0.5 * (s0.angular_velocity + s1.angular_velocity) - initial.gyro_bias;
        let mut next_rotation = rotation * Rotation3::new(omega * dt);
        next_rotation.renormalize();

        let a0 = rotation * (s0.acceleration - initial.accel_bias) + gravity;
        let a1 = next_rotation * (s1.acceleration - initial.accel_bias) + gravity;
        let accel = 0.5 * (a0 + a1);

        position += velocity * dt + 0.5 * accel * dt * dt;
        velocity += accel * dt;
        rotation = next_rotation;
        poses.push(Pose { rotation, position });
    }
    Ok(poses)
}

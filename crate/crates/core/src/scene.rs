//! Cameras, points, observations and the projection / robust-loss primitives
//! shared by the positioning and bundle adjustment solvers.
//!
//! Poses are stored in center form: a world point `X` maps into the camera
//! frame as `p = R(q) (X - t)`, with `q` the world-to-camera quaternion and
//! `t` the camera center.

use std::collections::HashSet;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

/// Camera-frame depth magnitude below which a projection is undefined.
pub const MIN_PROJECTION_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("degenerate projection: camera-frame depth {0:e}")]
    DegenerateProjection(f64),
    #[error("observation {index} references camera {camera} (have {num_cameras})")]
    UnknownCamera {
        index: usize,
        camera: usize,
        num_cameras: usize,
    },
    #[error("observation {index} references point {point} (have {num_points})")]
    UnknownPoint {
        index: usize,
        point: usize,
        num_points: usize,
    },
    #[error("duplicate observation of point {point} in camera {camera}")]
    DuplicateObservation { camera: usize, point: usize },
    #[error("observation {index} has non-positive depth {depth}")]
    InvalidDepth { index: usize, depth: f64 },
    #[error("camera {index} has non-positive focal length {focal}")]
    InvalidFocal { index: usize, focal: f64 },
    #[error("point {index} has non-finite coordinates")]
    NonFinitePoint { index: usize },
    #[error("huber threshold must be positive, got {0}")]
    InvalidHuberDelta(f64),
}

/// Projection model attached to a camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CameraModel {
    /// `f * (p_x / p_z, p_y / p_z) + (c_x, c_y)`.
    #[default]
    Pinhole,
    /// Bundle-Adjustment-in-the-Large convention: camera looks down `-z`,
    /// two radial coefficients held constant.
    BalRadial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: UnitQuaternion<f64>,
    /// Camera center in world coordinates.
    pub center: Vector3<f64>,
    pub focal: f64,
    /// Fixed principal point, not optimized.
    pub principal_point: Vector2<f64>,
    pub model: CameraModel,
    /// `(k1, k2)`; only read under [`CameraModel::BalRadial`].
    pub distortion: [f64; 2],
}

impl Camera {
    pub fn pinhole(rotation: UnitQuaternion<f64>, center: Vector3<f64>, focal: f64) -> Self {
        Self {
            rotation,
            center,
            focal,
            principal_point: Vector2::zeros(),
            model: CameraModel::Pinhole,
            distortion: [0.0; 2],
        }
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// World point expressed in the camera frame.
    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        rotate(&self.quaternion_wxyz(), &(x - self.center))
    }

    /// BAL-style translation `T = -R t`.
    pub fn translation(&self) -> Vector3<f64> {
        -rotate(&self.quaternion_wxyz(), &self.center)
    }

    /// True when `p` (camera frame) lies on the visible side for this model.
    pub fn is_in_front(&self, p: &Vector3<f64>) -> bool {
        is_in_front(self.model, p)
    }
}

pub(crate) fn is_in_front(model: CameraModel, p: &Vector3<f64>) -> bool {
    match model {
        CameraModel::Pinhole => p.z > MIN_PROJECTION_DEPTH,
        CameraModel::BalRadial => p.z < -MIN_PROJECTION_DEPTH,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3D {
    pub position: Vector3<f64>,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
    /// Camera-frame depth of the observed point, when known.
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub points: Vec<Point3D>,
    pub observations: Vec<Observation>,
}

impl Scene {
    /// Checks index ranges, pair uniqueness, depths, focals and finiteness.
    pub fn validate(&self) -> Result<(), SceneError> {
        for (index, cam) in self.cameras.iter().enumerate() {
            if !(cam.focal > 0.0) {
                return Err(SceneError::InvalidFocal {
                    index,
                    focal: cam.focal,
                });
            }
        }
        for (index, p) in self.points.iter().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(SceneError::NonFinitePoint { index });
            }
        }
        let mut seen = HashSet::with_capacity(self.observations.len());
        for (index, obs) in self.observations.iter().enumerate() {
            if obs.camera >= self.cameras.len() {
                return Err(SceneError::UnknownCamera {
                    index,
                    camera: obs.camera,
                    num_cameras: self.cameras.len(),
                });
            }
            if obs.point >= self.points.len() {
                return Err(SceneError::UnknownPoint {
                    index,
                    point: obs.point,
                    num_points: self.points.len(),
                });
            }
            if let Some(depth) = obs.depth {
                if !(depth > 0.0) {
                    return Err(SceneError::InvalidDepth { index, depth });
                }
            }
            if !seen.insert((obs.camera, obs.point)) {
                return Err(SceneError::DuplicateObservation {
                    camera: obs.camera,
                    point: obs.point,
                });
            }
        }
        Ok(())
    }

    pub fn observations_per_point(&self) -> Vec<usize> {
        let mut counts = vec![0; self.points.len()];
        for obs in &self.observations {
            counts[obs.point] += 1;
        }
        counts
    }

    pub fn observations_per_camera(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cameras.len()];
        for obs in &self.observations {
            counts[obs.camera] += 1;
        }
        counts
    }

    /// Twice the largest distance of a camera center from the centers' centroid.
    pub fn diameter(&self) -> f64 {
        if self.cameras.is_empty() {
            return 0.0;
        }
        let centroid = self
            .cameras
            .iter()
            .fold(Vector3::zeros(), |acc, c| acc + c.center)
            / self.cameras.len() as f64;
        2.0 * self
            .cameras
            .iter()
            .map(|c| (c.center - centroid).norm())
            .fold(0.0, f64::max)
    }

    pub fn has_depths(&self) -> bool {
        !self.observations.is_empty() && self.observations.iter().all(|o| o.depth.is_some())
    }
}

/// Rotates `v` by the quaternion `q = [w, x, y, z]`.
///
/// The quaternion is normalized before use, so non-unit input is accepted.
pub fn rotate(q: &[f64; 4], v: &Vector3<f64>) -> Vector3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let w = q[0] / n;
    let u = Vector3::new(q[1] / n, q[2] / n, q[3] / n);
    let uv = u.cross(v);
    v + 2.0 * w * uv + 2.0 * u.cross(&uv)
}

/// Rotation matrix of a (normalized) `[w, x, y, z]` quaternion.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn quaternion_from_wxyz(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Angle in radians of the rotation taking `a` to `b`.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    (a * b.inverse()).angle()
}

/// Projects a camera-frame point with the given intrinsics.
pub fn project_camera_frame(
    model: CameraModel,
    focal: f64,
    principal_point: &Vector2<f64>,
    distortion: &[f64; 2],
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, SceneError> {
    if p.z.abs() < MIN_PROJECTION_DEPTH {
        return Err(SceneError::DegenerateProjection(p.z));
    }
    let uv = match model {
        CameraModel::Pinhole => Vector2::new(p.x / p.z, p.y / p.z) * focal,
        CameraModel::BalRadial => {
            let n = Vector2::new(-p.x / p.z, -p.y / p.z);
            let r2 = n.norm_squared();
            let radial = 1.0 + distortion[0] * r2 + distortion[1] * r2 * r2;
            n * (focal * radial)
        }
    };
    Ok(uv + principal_point)
}

/// Pixel coordinates of `point` seen by `camera`.
pub fn project(camera: &Camera, point: &Point3D) -> Result<Vector2<f64>, SceneError> {
    let p = camera.to_camera_frame(&point.position);
    project_camera_frame(
        camera.model,
        camera.focal,
        &camera.principal_point,
        &camera.distortion,
        &p,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RobustLoss {
    #[default]
    Trivial,
    Huber {
        delta: f64,
    },
}

impl RobustLoss {
    pub fn huber(delta: f64) -> Result<Self, SceneError> {
        if delta > 0.0 && delta.is_finite() {
            Ok(Self::Huber { delta })
        } else {
            Err(SceneError::InvalidHuberDelta(delta))
        }
    }
}

/// Robustified cost and IRLS weight for a squared residual norm `s`.
///
/// Huber: quadratic for `s <= delta^2`, `2 delta sqrt(s) - delta^2` beyond,
/// with weight `delta / sqrt(s)`. The weight enters the solvers as a
/// `sqrt(weight)` scaling of residual and Jacobian rows.
pub fn robust_weight(loss: RobustLoss, squared_norm: f64) -> (f64, f64) {
    match loss {
        RobustLoss::Trivial => (squared_norm, 1.0),
        RobustLoss::Huber { delta } => {
            if squared_norm <= delta * delta {
                (squared_norm, 1.0)
            } else {
                let norm = squared_norm.sqrt();
                (2.0 * delta * norm - delta * delta, delta / norm)
            }
        }
    }
}

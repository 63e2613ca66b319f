//! Synthetic scenes with ground truth, pose perturbation, similarity
//! alignment and accuracy metrics.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::scene::{project, Camera, Observation, Point3D, Scene, SceneError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate synthetic configuration: {0}")]
    DegenerateConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} cameras, got {got}")]
    InsufficientCameras { needed: usize, got: usize },
    #[error("estimate has {estimate} cameras but truth has {truth}")]
    CameraCountMismatch { estimate: usize, truth: usize },
    #[error("no observations to evaluate")]
    EmptyProblem,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rig {
    /// Cameras on a horizontal circle with a small height undulation.
    #[default]
    Ring,
    /// Cameras spread over a sphere (Fibonacci lattice).
    Sphere,
}

impl std::str::FromStr for Rig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Rig::Ring),
            "sphere" => Ok(Rig::Sphere),
            other => Err(format!("unknown rig '{other}' (expected ring or sphere)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_cameras: usize,
    pub num_points: usize,
    pub rig: Rig,
    pub radius: f64,
    pub focal: f64,
    pub pixel_noise_sigma: f64,
    /// Fraction of cameras (nearest first) that observe each point.
    pub visibility_fraction: f64,
    /// Fixed number of views per point; overrides `visibility_fraction`.
    pub views_per_point: Option<usize>,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_cameras: 10,
            num_points: 200,
            rig: Rig::Ring,
            radius: 10.0,
            focal: 500.0,
            pixel_noise_sigma: 0.0,
            visibility_fraction: 1.0,
            views_per_point: None,
            outlier_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::DegenerateConfig(m.to_string()));
        if self.num_cameras < 2 {
            return bad("at least 2 cameras are required");
        }
        if self.num_points < 3 {
            return bad("at least 3 points are required");
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad("focal must be positive");
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return bad("noise sigma must be non-negative");
        }
        if !(self.visibility_fraction > 0.0 && self.visibility_fraction <= 1.0) {
            return bad("visibility fraction must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction must be in [0, 1)");
        }
        if self.views_per_point() > self.num_cameras {
            return bad("more views per point than cameras");
        }
        Ok(())
    }

    /// Number of cameras observing each point.
    pub fn views_per_point(&self) -> usize {
        self.views_per_point.unwrap_or_else(|| {
            ((self.visibility_fraction * self.num_cameras as f64).round() as usize).max(2)
        })
    }
}

/// Synthetic instance: ground truth and its noisy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    /// Exact projections and depths.
    pub truth: Scene,
    /// Same geometry with noisy and outlier pixels.
    pub observed: Scene,
    /// Which observations were replaced by outliers.
    pub outliers: Vec<bool>,
}

/// World-to-camera rotation of a camera at `center` looking at the origin.
pub fn look_at_origin(center: &Vector3<f64>) -> UnitQuaternion<f64> {
    let forward = (-center).normalize();
    let up = if forward.y.abs() > 0.99 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let right = up.cross(&forward).normalize();
    let down = forward.cross(&right);
    let m = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

fn rig_centers(rig: Rig, n: usize, radius: f64) -> Vec<Vector3<f64>> {
    let tau = std::f64::consts::TAU;
    (0..n)
        .map(|i| {
            let s = i as f64 / n as f64;
            match rig {
                Rig::Ring => {
                    let a = tau * s;
                    let h = 0.15 * (3.0 * a).cos();
                    Vector3::new(a.cos(), h, a.sin()).normalize() * radius
                }
                Rig::Sphere => {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let a = tau * i as f64 * 0.618_033_988_749_895;
                    Vector3::new(r * a.cos(), y, r * a.sin()) * radius
                }
            }
        })
        .collect()
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Generates a ground-truth scene and a noisy observation of it.
pub fn generate(config: &SynthConfig) -> Result<SynthScene, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cameras: Vec<Camera> = rig_centers(config.rig, config.num_cameras, config.radius)
        .into_iter()
        .map(|c| Camera::pinhole(look_at_origin(&c), c, config.focal))
        .collect();

    let half = 0.5 * config.radius;
    let points: Vec<Point3D> = (0..config.num_points)
        .map(|_| loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm_squared() <= 1.0 {
                break Point3D { position: v * half };
            }
        })
        .collect();

    let k = config.views_per_point();
    let mut observations = Vec::with_capacity(k * points.len());
    let mut order: Vec<usize> = (0..cameras.len()).collect();
    for (j, pt) in points.iter().enumerate() {
        let dist = |i: usize| (cameras[i].center - pt.position).norm_squared();
        order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut seen: Vec<usize> = order[..k].to_vec();
        seen.sort_unstable();
        for i in seen {
            let cam = &cameras[i];
            let pixel = project(cam, pt)?;
            let depth = cam.to_camera_frame(&pt.position).z;
            observations.push(Observation {
                camera: i,
                point: j,
                pixel,
                depth: Some(depth),
            });
        }
    }
    let truth = Scene {
        cameras,
        points,
        observations,
    };

    let mut observed = truth.clone();
    if config.pixel_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.pixel_noise_sigma).expect("validated sigma");
        for o in &mut observed.observations {
            o.pixel += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
    }
    let n = observed.observations.len();
    let num_outliers = (config.outlier_fraction * n as f64).round() as usize;
    let mut outliers = vec![false; n];
    let window = 0.6 * config.focal;
    for idx in sample(&mut rng, n, num_outliers).into_vec() {
        outliers[idx] = true;
    }
    for (o, &bad) in observed.observations.iter_mut().zip(&outliers) {
        if bad {
            let pp = observed.cameras[o.camera].principal_point;
            o.pixel = pp
                + Vector2::new(
                    rng.gen_range(-window..window),
                    rng.gen_range(-window..window),
                );
        }
    }
    Ok(SynthScene {
        truth,
        observed,
        outliers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    pub rot_deg: f64,
    /// Center jitter as a fraction of the scene diameter.
    pub center_frac: f64,
    pub focal_frac: f64,
    /// Point jitter as a fraction of the scene diameter.
    pub point_frac: f64,
}

/// Applies random perturbations of exactly the given magnitudes.
pub fn perturb(scene: &Scene, p: &Perturbation, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diameter = scene.diameter();
    let angle = p.rot_deg.to_radians();
    let mut out = scene.clone();
    for cam in &mut out.cameras {
        let axis = Unit::new_unchecked(random_unit(&mut rng));
        let dir = random_unit(&mut rng);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if angle != 0.0 {
            cam.rotation = UnitQuaternion::from_axis_angle(&axis, angle) * cam.rotation;
        }
        cam.center += dir * (p.center_frac * diameter);
        cam.focal *= 1.0 + sign * p.focal_frac;
    }
    for pt in &mut out.points {
        let dir = random_unit(&mut rng);
        pt.position += dir * (p.point_frac * diameter);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentKind {
    Sim3,
    Se3,
}

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub kind: AlignmentKind,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn identity(kind: AlignmentKind) -> Self {
        Self {
            kind,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Transforms every camera and point of `scene`.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        let inv = self.rotation.inverse();
        for cam in &mut out.cameras {
            cam.center = self.apply_point(&cam.center);
            cam.rotation *= inv;
        }
        for p in &mut out.points {
            p.position = self.apply_point(&p.position);
        }
        out
    }
}

/// Least-squares alignment of the estimate's camera centers onto the truth's.
pub fn align(
    estimate: &Scene,
    truth: &Scene,
    kind: AlignmentKind,
) -> Result<(Alignment, Scene), MetricsError> {
    let n = estimate.cameras.len();
    if n != truth.cameras.len() {
        return Err(MetricsError::CameraCountMismatch {
            estimate: n,
            truth: truth.cameras.len(),
        });
    }
    if n < 3 {
        return Err(MetricsError::InsufficientCameras { needed: 3, got: n });
    }
    let src: Vec<Vector3<f64>> = estimate.cameras.iter().map(|c| c.center).collect();
    let dst: Vec<Vector3<f64>> = truth.cameras.iter().map(|c| c.center).collect();
    let mu_s = src.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut signs = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        signs[(2, 2)] = -1.0;
    }
    let r = u * signs * v_t;
    let scale = match kind {
        AlignmentKind::Se3 => 1.0,
        AlignmentKind::Sim3 => {
            if var_s > 0.0 {
                (svd.singular_values.component_mul(&signs.diagonal())).sum() / var_s
            } else {
                1.0
            }
        }
    };
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = mu_d - rotation * mu_s * scale;
    let alignment = Alignment {
        kind,
        rotation,
        translation,
        scale,
    };
    Ok((alignment, alignment.apply(estimate)))
}

pub fn center_rmse(estimate: &Scene, truth: &Scene) -> f64 {
    let n = estimate.cameras.len().min(truth.cameras.len());
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = estimate
        .cameras
        .iter()
        .zip(&truth.cameras)
        .map(|(a, b)| (a.center - b.center).norm_squared())
        .sum();
    (sum / n as f64).sqrt()
}

/// Per-camera absolute rotation errors in degrees.
pub fn rotation_errors_deg(estimate: &Scene, truth: &Scene) -> Vec<f64> {
    estimate
        .cameras
        .iter()
        .zip(&truth.cameras)
        .map(|(a, b)| a.rotation.angle_to(&b.rotation).to_degrees())
        .collect()
}

/// Pairwise relative rotation errors in degrees over all unordered pairs.
pub fn relative_rotation_errors_deg(estimate: &Scene, truth: &Scene) -> Vec<f64> {
    let n = estimate.cameras.len().min(truth.cameras.len());
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let rel_est = estimate.cameras[j].rotation * estimate.cameras[i].rotation.inverse();
            let rel_true = truth.cameras[j].rotation * truth.cameras[i].rotation.inverse();
            out.push((rel_est * rel_true.inverse()).angle().to_degrees());
        }
    }
    out
}

/// Mean clipped linear recall of pairwise rotation errors, on a 0-100 scale,
/// for each threshold in degrees.
pub fn rotation_auc(estimate: &Scene, truth: &Scene, thresholds_deg: &[f64]) -> Vec<f64> {
    let errors = relative_rotation_errors_deg(estimate, truth);
    thresholds_deg
        .iter()
        .map(|&tau| {
            if errors.is_empty() {
                return 0.0;
            }
            let sum: f64 = errors.iter().map(|e| (1.0 - e / tau).max(0.0)).sum();
            100.0 * sum / errors.len() as f64
        })
        .collect()
}

/// Unweighted root-mean-square reprojection error in pixels.
pub fn reproj_rmse(scene: &Scene) -> Result<f64, MetricsError> {
    reproj_rmse_where(scene, |_| true)
}

/// As [`reproj_rmse`] over the observations whose index passes `keep`.
pub fn reproj_rmse_where(scene: &Scene, keep: impl Fn(usize) -> bool) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, o) in scene.observations.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        let uv = project(&scene.cameras[o.camera], &scene.points[o.point])?;
        sum += (uv - o.pixel).norm_squared();
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyProblem);
    }
    Ok((sum / count as f64).sqrt())
}

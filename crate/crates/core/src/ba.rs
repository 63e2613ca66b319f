//! Bundle adjustment: reprojection residuals, analytic Jacobians, robust
//! weighting and pruning of under-constrained parameters.
//!
//! Parameter vector layout: one 7-scalar pose `(qw, qx, qy, qz, cx, cy, cz)`
//! per camera (quaternion plus camera center), then the focal lengths (one
//! per camera, a single shared one, or none), then 3 scalars per point.

use std::sync::Arc;

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::lm::{LeastSquaresProblem, LmConfig, LmError, LmSolver, SolveReport};
use crate::scene::{
    is_in_front, robust_weight, rotate, rotation_matrix, Camera, CameraModel, Point3D, RobustLoss,
    Scene, SceneError,
};
use crate::sparse_block::{BlockLayout, BlockSparseJacobian, ParamKind};

#[derive(Debug, Error)]
pub enum BaError {
    #[error("no observations left after pruning")]
    EmptyProblem,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub loss: RobustLoss,
    pub optimize_focal: bool,
    pub shared_focal: bool,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            loss: RobustLoss::Trivial,
            optimize_focal: true,
            shared_focal: false,
        }
    }
}

impl BaOptions {
    pub fn with_loss(loss: RobustLoss) -> Self {
        Self {
            loss,
            ..Self::default()
        }
    }
}

const POSE: usize = 7;

/// A bundle adjustment instance over a fixed scene structure.
#[derive(Debug, Clone)]
pub struct BaProblem {
    scene: Scene,
    options: BaOptions,
    layout: Arc<BlockLayout>,
    /// Block index of the focal used by each camera, if optimized.
    focal_block: Vec<Option<usize>>,
    point_block0: usize,
    values_per_obs: usize,
}

impl BaProblem {
    pub fn new(scene: Scene, options: BaOptions) -> Result<Self, BaError> {
        scene.validate()?;
        let c = scene.cameras.len();
        let num_focals = match (options.optimize_focal, options.shared_focal) {
            (false, _) => 0,
            (true, true) => usize::from(c > 0),
            (true, false) => c,
        };
        let kinds = std::iter::repeat_n(ParamKind::CameraPose, c)
            .chain(std::iter::repeat_n(ParamKind::Focal, num_focals))
            .chain(std::iter::repeat_n(ParamKind::Point, scene.points.len()));
        let layout = Arc::new(BlockLayout::new(
            kinds,
            std::iter::repeat_n(2, scene.observations.len()),
        ));
        let focal_block = (0..c)
            .map(|i| match (options.optimize_focal, options.shared_focal) {
                (false, _) => None,
                (true, true) => Some(c),
                (true, false) => Some(c + i),
            })
            .collect();
        let values_per_obs = 2 * (POSE + 3 + usize::from(options.optimize_focal));
        Ok(Self {
            point_block0: c + num_focals,
            scene,
            options,
            layout,
            focal_block,
            values_per_obs,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn options(&self) -> &BaOptions {
        &self.options
    }

    /// Parameter vector of the stored scene.
    pub fn encode(&self) -> Vec<f64> {
        encode_scene(
            &self.scene,
            &self.layout,
            &self.focal_block,
            self.point_block0,
        )
    }

    /// Encodes another scene with the same structure (e.g. ground truth).
    pub fn encode_scene(&self, scene: &Scene) -> Vec<f64> {
        encode_scene(scene, &self.layout, &self.focal_block, self.point_block0)
    }

    /// Scene with poses, focals and points replaced from `theta`.
    pub fn decode(&self, theta: &[f64]) -> Scene {
        let mut scene = self.scene.clone();
        for (i, cam) in scene.cameras.iter_mut().enumerate() {
            let o = self.layout.param(i).offset;
            cam.rotation = crate::scene::quaternion_from_wxyz(&[
                theta[o],
                theta[o + 1],
                theta[o + 2],
                theta[o + 3],
            ]);
            cam.center = Vector3::new(theta[o + 4], theta[o + 5], theta[o + 6]);
            if let Some(b) = self.focal_block[i] {
                cam.focal = theta[self.layout.param(b).offset];
            }
        }
        for (j, pt) in scene.points.iter_mut().enumerate() {
            let o = self.layout.param(self.point_block0 + j).offset;
            pt.position = Vector3::new(theta[o], theta[o + 1], theta[o + 2]);
        }
        scene
    }

    fn fill_structure(&self, jac: &mut BlockSparseJacobian) {
        jac.reset(self.layout.clone());
        for (k, obs) in self.scene.observations.iter().enumerate() {
            let blocks = [
                Some(obs.camera),
                self.focal_block[obs.camera],
                Some(self.point_block0 + obs.point),
            ];
            for b in blocks.into_iter().flatten() {
                jac.reserve_block(k, b)
                    .expect("observation blocks are generated in order");
            }
        }
    }

    fn structure_ready(&self, jac: &BlockSparseJacobian) -> bool {
        Arc::ptr_eq(jac.layout_arc(), &self.layout)
            && jac.values().len() == self.values_per_obs * self.scene.observations.len()
    }

    /// Residual, cost and (optionally) weighted Jacobian blocks for one observation.
    fn observation(
        &self,
        theta: &[f64],
        k: usize,
        residual: &mut [f64],
        blocks: Option<&mut [f64]>,
    ) -> f64 {
        let obs = &self.scene.observations[k];
        let cam = &self.scene.cameras[obs.camera];
        let po = self.layout.param(obs.camera).offset;
        let q = Vector4::new(theta[po], theta[po + 1], theta[po + 2], theta[po + 3]);
        let center = Vector3::new(theta[po + 4], theta[po + 5], theta[po + 6]);
        let focal = match self.focal_block[obs.camera] {
            Some(b) => theta[self.layout.param(b).offset],
            None => cam.focal,
        };
        let xo = self.layout.param(self.point_block0 + obs.point).offset;
        let x = Vector3::new(theta[xo], theta[xo + 1], theta[xo + 2]);

        let qn = q.norm();
        let u = q / qn;
        let v = x - center;
        let p = rotate(&[q[0], q[1], q[2], q[3]], &v);
        if !is_in_front(cam.model, &p) {
            residual.fill(0.0);
            if let Some(b) = blocks {
                b.fill(0.0);
            }
            return 0.0;
        }
        let (uv, d_focal, d_p) = project_with_derivatives(cam, focal, &p);
        let e = uv - obs.pixel;
        let (cost, weight) = robust_weight(self.options.loss, e.norm_squared());
        let sw = weight.sqrt();
        residual[0] = sw * e.x;
        residual[1] = sw * e.y;

        if let Some(b) = blocks {
            let rot = rotation_matrix(&[u[0], u[1], u[2], u[3]]);
            let d_q = d_p * rotated_point_wrt_quaternion(&u, &v) * tangent_projector(&u, qn);
            let d_x = d_p * rot;
            let mut o = 0;
            for r in 0..2 {
                for c in 0..4 {
                    b[o + r * POSE + c] = sw * d_q[(r, c)];
                }
                for c in 0..3 {
                    b[o + r * POSE + 4 + c] = -sw * d_x[(r, c)];
                }
            }
            o += 2 * POSE;
            if self.focal_block[obs.camera].is_some() {
                b[o] = sw * d_focal.x;
                b[o + 1] = sw * d_focal.y;
                o += 2;
            }
            for r in 0..2 {
                for c in 0..3 {
                    b[o + r * 3 + c] = sw * d_x[(r, c)];
                }
            }
        }
        0.5 * cost
    }
}

fn encode_scene(
    scene: &Scene,
    layout: &BlockLayout,
    focal_block: &[Option<usize>],
    point_block0: usize,
) -> Vec<f64> {
    let mut theta = vec![0.0; layout.total_params()];
    for (i, cam) in scene.cameras.iter().enumerate() {
        let o = layout.param(i).offset;
        theta[o..o + 4].copy_from_slice(&cam.quaternion_wxyz());
        theta[o + 4..o + 7].copy_from_slice(cam.center.as_slice());
        if let Some(b) = focal_block[i] {
            theta[layout.param(b).offset] = cam.focal;
        }
    }
    for (j, pt) in scene.points.iter().enumerate() {
        let o = layout.param(point_block0 + j).offset;
        theta[o..o + 3].copy_from_slice(pt.position.as_slice());
    }
    theta
}

/// Pixel, derivative w.r.t. focal, and derivative w.r.t. the camera-frame point.
fn project_with_derivatives(
    cam: &Camera,
    focal: f64,
    p: &Vector3<f64>,
) -> (Vector2<f64>, Vector2<f64>, Matrix2x3<f64>) {
    let iz = 1.0 / p.z;
    match cam.model {
        CameraModel::Pinhole => {
            let n = Vector2::new(p.x * iz, p.y * iz);
            let d_p = Matrix2x3::new(
                focal * iz,
                0.0,
                -focal * n.x * iz,
                0.0,
                focal * iz,
                -focal * n.y * iz,
            );
            (n * focal + cam.principal_point, n, d_p)
        }
        CameraModel::BalRadial => {
            let [k1, k2] = cam.distortion;
            let n = Vector2::new(-p.x * iz, -p.y * iz);
            let r2 = n.norm_squared();
            let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
            let d_radial = k1 + 2.0 * k2 * r2;
            let d_n = Matrix2x3::new(-iz, 0.0, p.x * iz * iz, 0.0, -iz, p.y * iz * iz);
            let d_uv_n = (nalgebra::Matrix2::identity() * radial
                + n * n.transpose() * (2.0 * d_radial))
                * focal;
            (
                n * (focal * radial) + cam.principal_point,
                n * radial,
                d_uv_n * d_n,
            )
        }
    }
}

/// Derivative of `R(u) v` w.r.t. the quaternion components, using the
/// homogeneous-quadratic form of the rotation.
fn rotated_point_wrt_quaternion(u: &Vector4<f64>, v: &Vector3<f64>) -> Matrix3x4<f64> {
    let w = u[0];
    let a = Vector3::new(u[1], u[2], u[3]);
    let d_w = 2.0 * (w * v + a.cross(v));
    let d_a =
        -2.0 * v * a.transpose() + Matrix3::identity() * (2.0 * a.dot(v)) + 2.0 * a * v.transpose()
            - 2.0 * w * v.cross_matrix();
    let mut out = Matrix3x4::zeros();
    out.set_column(0, &d_w);
    out.fixed_view_mut::<3, 3>(0, 1).copy_from(&d_a);
    out
}

/// Derivative of `q / |q|` w.r.t. `q`.
fn tangent_projector(u: &Vector4<f64>, norm: f64) -> Matrix4<f64> {
    (Matrix4::identity() - u * u.transpose()) / norm
}

impl LeastSquaresProblem for BaProblem {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn evaluate(
        &self,
        theta: &[f64],
        residuals: &mut [f64],
        jacobian: Option<&mut BlockSparseJacobian>,
    ) -> f64 {
        let costs: Vec<f64> = match jacobian {
            Some(jac) => {
                if !self.structure_ready(jac) {
                    self.fill_structure(jac);
                }
                residuals
                    .par_chunks_mut(2)
                    .zip(jac.values_mut().par_chunks_mut(self.values_per_obs))
                    .enumerate()
                    .map(|(k, (r, b))| self.observation(theta, k, r, Some(b)))
                    .collect()
            }
            None => residuals
                .par_chunks_mut(2)
                .enumerate()
                .map(|(k, r)| self.observation(theta, k, r, None))
                .collect(),
        };
        costs.iter().sum()
    }
}

/// Weighted residual vector at `theta`.
pub fn ba_residuals(problem: &BaProblem, theta: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    problem.evaluate(theta, &mut r, None);
    r
}

/// Weighted Jacobian at `theta`.
pub fn ba_jacobian(problem: &BaProblem, theta: &[f64]) -> BlockSparseJacobian {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    let mut j = BlockSparseJacobian::new(problem.layout.clone());
    problem.evaluate(theta, &mut r, Some(&mut j));
    j
}

/// `½ Σ ρ(|e|²)` at `theta`.
pub fn ba_cost(problem: &BaProblem, theta: &[f64]) -> f64 {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    problem.evaluate(theta, &mut r, None)
}

/// Old-to-new index maps produced by [`prune`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    pub cameras: Vec<Option<usize>>,
    pub points: Vec<Option<usize>>,
    pub observations: Vec<Option<usize>>,
}

impl Remap {
    pub fn is_identity(&self) -> bool {
        let ident = |m: &[Option<usize>]| m.iter().enumerate().all(|(i, v)| *v == Some(i));
        ident(&self.cameras) && ident(&self.points) && ident(&self.observations)
    }
}

/// Removes points seen by fewer than two cameras and cameras without
/// observations, repeating until nothing changes.
pub fn prune(scene: &Scene) -> Result<(Scene, Remap), BaError> {
    let mut cam_alive = vec![true; scene.cameras.len()];
    let mut pt_alive = vec![true; scene.points.len()];
    let mut obs_alive = vec![true; scene.observations.len()];
    loop {
        let mut per_point = vec![0usize; scene.points.len()];
        let mut per_cam = vec![0usize; scene.cameras.len()];
        for (k, o) in scene.observations.iter().enumerate() {
            if obs_alive[k] {
                per_point[o.point] += 1;
                per_cam[o.camera] += 1;
            }
        }
        let mut changed = false;
        for (j, alive) in pt_alive.iter_mut().enumerate() {
            if *alive && per_point[j] < 2 {
                *alive = false;
                changed = true;
            }
        }
        for (i, alive) in cam_alive.iter_mut().enumerate() {
            if *alive && per_cam[i] == 0 {
                *alive = false;
                changed = true;
            }
        }
        for (k, o) in scene.observations.iter().enumerate() {
            if obs_alive[k] && !(pt_alive[o.point] && cam_alive[o.camera]) {
                obs_alive[k] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let compact = |alive: &[bool]| {
        let mut next = 0;
        alive
            .iter()
            .map(|&a| {
                a.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect::<Vec<_>>()
    };
    let remap = Remap {
        cameras: compact(&cam_alive),
        points: compact(&pt_alive),
        observations: compact(&obs_alive),
    };
    if !obs_alive.iter().any(|&a| a) {
        return Err(BaError::EmptyProblem);
    }
    let out = Scene {
        cameras: scene
            .cameras
            .iter()
            .zip(&cam_alive)
            .filter(|(_, &a)| a)
            .map(|(c, _)| c.clone())
            .collect(),
        points: scene
            .points
            .iter()
            .zip(&pt_alive)
            .filter(|(_, &a)| a)
            .map(|(p, _)| *p)
            .collect::<Vec<Point3D>>(),
        observations: scene
            .observations
            .iter()
            .zip(&obs_alive)
            .filter(|(_, &a)| a)
            .map(|(o, _)| {
                let mut o = *o;
                o.camera = remap.cameras[o.camera].expect("live observation has a live camera");
                o.point = remap.points[o.point].expect("live observation has a live point");
                o
            })
            .collect(),
    };
    Ok((out, remap))
}

/// Runs bundle adjustment on a pruned scene.
pub fn run_ba(
    scene: &Scene,
    loss: RobustLoss,
    config: &LmConfig,
) -> Result<(Scene, SolveReport), BaError> {
    run_ba_with(
        &mut LmSolver::new(),
        scene,
        BaOptions::with_loss(loss),
        config,
    )
}

/// As [`run_ba`], reusing `solver`'s buffers and with explicit options.
pub fn run_ba_with(
    solver: &mut LmSolver,
    scene: &Scene,
    options: BaOptions,
    config: &LmConfig,
) -> Result<(Scene, SolveReport), BaError> {
    if scene.observations.is_empty() {
        return Err(BaError::EmptyProblem);
    }
    let problem = BaProblem::new(scene.clone(), options)?;
    let theta0 = problem.encode();
    let (theta, report) = solver.solve(&problem, &theta0, config)?;
    Ok((problem.decode(&theta), report))
}

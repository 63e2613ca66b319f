//! Global positioning: camera centers, points and per-observation scales
//! under fixed rotations, with residual `v - d (X - t)` per observation.
//!
//! In depth mode the scale is the known inverse range of the observation,
//! which fixes the metric scale of the reconstruction.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::lm::{LeastSquaresProblem, LmConfig, LmError, LmSolver, SolveReport};
use crate::scene::{robust_weight, CameraModel, RobustLoss, Scene, SceneError};
use crate::sparse_block::{BlockLayout, BlockSparseJacobian, ParamKind};

/// Lower bound applied to optimized scales after every step.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("observation {index} has no depth but depth mode is on")]
    MissingDepth { index: usize },
    #[error("positioning needs at least one camera")]
    NoCameras,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpOptions {
    pub depth_mode: bool,
    pub loss: RobustLoss,
    /// Seed of the uniform unit-cube initialization.
    pub seed: u64,
    /// Start from the scene's centers and points instead of random values.
    pub init_from_scene: bool,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            depth_mode: false,
            loss: RobustLoss::Trivial,
            seed: 0,
            init_from_scene: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpProblem {
    /// Unit world-frame ray per observation.
    rays: Vec<Vector3<f64>>,
    cameras: Vec<usize>,
    points: Vec<usize>,
    /// Inverse ranges in depth mode.
    inverse_ranges: Option<Vec<f64>>,
    num_cameras: usize,
    num_points: usize,
    loss: RobustLoss,
    gauge_fixed: bool,
    layout: Arc<BlockLayout>,
    initial: Vec<f64>,
}

/// Builds the positioning problem from the scene's rotations, intrinsics and
/// pixels. Initial centers and points are drawn uniformly from the unit cube
/// (or copied from the scene); scales start at 1.
pub fn make_rays(scene: &Scene, options: &GpOptions) -> Result<GpProblem, GpError> {
    scene.validate()?;
    let n = scene.observations.len();
    let mut rays = Vec::with_capacity(n);
    let mut inverse_ranges = options.depth_mode.then(|| Vec::with_capacity(n));
    for (index, obs) in scene.observations.iter().enumerate() {
        let cam = &scene.cameras[obs.camera];
        let m = (obs.pixel - cam.principal_point) / cam.focal;
        // Distortion of BAL-style cameras is ignored for the ray direction.
        let dir = match cam.model {
            CameraModel::Pinhole => Vector3::new(m.x, m.y, 1.0),
            CameraModel::BalRadial => Vector3::new(-m.x, -m.y, -1.0),
        };
        if let Some(inv) = inverse_ranges.as_mut() {
            let depth = obs.depth.ok_or(GpError::MissingDepth { index })?;
            inv.push(1.0 / (depth * dir.norm()));
        }
        rays.push(cam.rotation.inverse_transform_vector(&dir).normalize());
    }
    let num_cameras = scene.cameras.len();
    let num_points = scene.points.len();
    let kinds = std::iter::repeat_n(ParamKind::GpCenter, num_cameras)
        .chain(std::iter::repeat_n(ParamKind::GpPoint, num_points))
        .chain(std::iter::repeat_n(
            ParamKind::GpScale,
            if options.depth_mode { 0 } else { n },
        ));
    let layout = Arc::new(BlockLayout::new(kinds, std::iter::repeat_n(3, n)));

    let mut initial = vec![0.0; layout.total_params()];
    let split = 3 * (num_cameras + num_points);
    if options.init_from_scene {
        for (i, c) in scene.cameras.iter().enumerate() {
            initial[3 * i..3 * i + 3].copy_from_slice(c.center.as_slice());
        }
        for (j, p) in scene.points.iter().enumerate() {
            let o = 3 * (num_cameras + j);
            initial[o..o + 3].copy_from_slice(p.position.as_slice());
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        for v in &mut initial[..split] {
            *v = rng.gen::<f64>();
        }
    }
    initial[split..].iter_mut().for_each(|d| *d = 1.0);

    Ok(GpProblem {
        rays,
        cameras: scene.observations.iter().map(|o| o.camera).collect(),
        points: scene.observations.iter().map(|o| o.point).collect(),
        inverse_ranges,
        num_cameras,
        num_points,
        loss: options.loss,
        gauge_fixed: false,
        layout,
        initial,
    })
}

/// Holds camera 0's center constant; the scale gauge is enforced by
/// [`GpProblem::retract`] outside depth mode.
pub fn fix_gauge(mut problem: GpProblem) -> Result<GpProblem, GpError> {
    if problem.num_cameras == 0 {
        return Err(GpError::NoCameras);
    }
    problem.gauge_fixed = true;
    Ok(problem)
}

impl GpProblem {
    pub fn depth_mode(&self) -> bool {
        self.inverse_ranges.is_some()
    }

    pub fn rays(&self) -> &[Vector3<f64>] {
        &self.rays
    }

    pub fn initial_parameters(&self) -> &[f64] {
        &self.initial
    }

    pub fn center(&self, theta: &[f64], camera: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&theta[3 * camera..3 * camera + 3])
    }

    pub fn point(&self, theta: &[f64], point: usize) -> Vector3<f64> {
        let o = 3 * (self.num_cameras + point);
        Vector3::from_column_slice(&theta[o..o + 3])
    }

    /// Scale of observation `k` (the known inverse range in depth mode).
    pub fn scale(&self, theta: &[f64], k: usize) -> f64 {
        match &self.inverse_ranges {
            Some(inv) => inv[k],
            None => theta[3 * (self.num_cameras + self.num_points) + k],
        }
    }

    /// Scene with centers and points taken from `theta`.
    pub fn decode(&self, scene: &Scene, theta: &[f64]) -> Scene {
        let mut out = scene.clone();
        for (i, c) in out.cameras.iter_mut().enumerate() {
            c.center = self.center(theta, i);
        }
        for (j, p) in out.points.iter_mut().enumerate() {
            p.position = self.point(theta, j);
        }
        out
    }

    fn observation(
        &self,
        theta: &[f64],
        k: usize,
        residual: &mut [f64],
        blocks: Option<&mut [f64]>,
    ) -> f64 {
        let cam = self.cameras[k];
        let diff = self.point(theta, self.points[k]) - self.center(theta, cam);
        let d = self.scale(theta, k);
        let u = self.rays[k] - diff * d;
        let (cost, weight) = robust_weight(self.loss, u.norm_squared());
        let sw = weight.sqrt();
        for r in 0..3 {
            residual[r] = sw * u[r];
        }
        if let Some(b) = blocks {
            b.fill(0.0);
            let center_value = if self.gauge_fixed && cam == 0 {
                0.0
            } else {
                sw * d
            };
            for r in 0..3 {
                b[r * 3 + r] = center_value;
                b[9 + r * 3 + r] = -sw * d;
            }
            if !self.depth_mode() {
                for r in 0..3 {
                    b[18 + r] = -sw * diff[r];
                }
            }
        }
        0.5 * cost
    }

    fn values_per_obs(&self) -> usize {
        if self.depth_mode() {
            18
        } else {
            21
        }
    }

    fn fill_structure(&self, jac: &mut BlockSparseJacobian) {
        jac.reset(self.layout.clone());
        let scale0 = self.num_cameras + self.num_points;
        for k in 0..self.rays.len() {
            jac.reserve_block(k, self.cameras[k]).expect("ordered");
            jac.reserve_block(k, self.num_cameras + self.points[k])
                .expect("ordered");
            if !self.depth_mode() {
                jac.reserve_block(k, scale0 + k).expect("ordered");
            }
        }
    }
}

impl LeastSquaresProblem for GpProblem {
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
                let per = self.values_per_obs();
                if !Arc::ptr_eq(jac.layout_arc(), &self.layout)
                    || jac.values().len() != per * self.rays.len()
                {
                    self.fill_structure(jac);
                }
                residuals
                    .par_chunks_mut(3)
                    .zip(jac.values_mut().par_chunks_mut(per))
                    .enumerate()
                    .map(|(k, (r, b))| self.observation(theta, k, r, Some(b)))
                    .collect()
            }
            None => residuals
                .par_chunks_mut(3)
                .enumerate()
                .map(|(k, r)| self.observation(theta, k, r, None))
                .collect(),
        };
        costs.iter().sum()
    }

    /// Clamps scales to the floor and renormalizes their mean to 1, moving
    /// centers and points about camera 0's center so that every `d (X - t)`
    /// is preserved.
    fn retract(&self, theta: &mut [f64]) -> Result<(), LmError> {
        if self.depth_mode() || self.rays.is_empty() {
            return Ok(());
        }
        let split = 3 * (self.num_cameras + self.num_points);
        let (positions, scales) = theta.split_at_mut(split);
        scales.iter_mut().for_each(|d| *d = d.max(SCALE_FLOOR));
        if !self.gauge_fixed {
            return Ok(());
        }
        let mean = scales.iter().sum::<f64>() / scales.len() as f64;
        scales.iter_mut().for_each(|d| *d /= mean);
        let anchor = [positions[0], positions[1], positions[2]];
        for (k, v) in positions.iter_mut().enumerate() {
            *v = anchor[k % 3] + mean * (*v - anchor[k % 3]);
        }
        Ok(())
    }
}

/// Weighted residual vector at `theta`.
pub fn gp_residuals(problem: &GpProblem, theta: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    problem.evaluate(theta, &mut r, None);
    r
}

/// Weighted Jacobian at `theta`.
pub fn gp_jacobian(problem: &GpProblem, theta: &[f64]) -> BlockSparseJacobian {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    let mut j = BlockSparseJacobian::new(problem.layout.clone());
    problem.evaluate(theta, &mut r, Some(&mut j));
    j
}

pub fn gp_cost(problem: &GpProblem, theta: &[f64]) -> f64 {
    let mut r = vec![0.0; problem.layout.total_residuals()];
    problem.evaluate(theta, &mut r, None)
}

/// Estimates centers and points with the scene's rotations held fixed.
pub fn run_gp(
    scene: &Scene,
    depth_mode: bool,
    loss: RobustLoss,
    config: &LmConfig,
) -> Result<(Scene, SolveReport), GpError> {
    let options = GpOptions {
        depth_mode,
        loss,
        ..GpOptions::default()
    };
    run_gp_with(&mut LmSolver::new(), scene, &options, config)
}

pub fn run_gp_with(
    solver: &mut LmSolver,
    scene: &Scene,
    options: &GpOptions,
    config: &LmConfig,
) -> Result<(Scene, SolveReport), GpError> {
    let problem = fix_gauge(make_rays(scene, options)?)?;
    let mut theta0 = problem.initial.clone();
    problem.retract(&mut theta0)?;
    let (theta, report) = solver.solve(&problem, &theta0, config)?;
    Ok((problem.decode(scene, &theta), report))
}

#![allow(dead_code)]

use gsfm_core::sparse_block::BlockSparseJacobian;
use gsfm_core::synth_metrics::{generate, perturb, Perturbation, SynthConfig, SynthScene};
use nalgebra::DMatrix;

pub fn dense_jacobian(j: &BlockSparseJacobian) -> DMatrix<f64> {
    let layout = j.layout();
    let mut out = DMatrix::zeros(layout.total_residuals(), layout.total_params());
    for (k, e) in j.entries().iter().enumerate() {
        let r = layout.residual(e.residual_block);
        let p = layout.param(e.param_block);
        let b = j.block(k);
        for row in 0..r.height {
            for col in 0..p.width() {
                out[(r.offset + row, p.offset + col)] = b[row * p.width() + col];
            }
        }
    }
    out
}

/// Central differences of `f` with a relative step.
pub fn numeric_jacobian(theta: &[f64], m: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, theta.len());
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        let h = 1e-6 * theta[k].abs().max(1.0);
        t[k] = theta[k] + h;
        let plus = f(&t);
        t[k] = theta[k] - h;
        let minus = f(&t);
        t[k] = theta[k];
        for r in 0..m {
            out[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    out
}

pub fn numeric_gradient(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let h = 1e-6 * theta[k].abs().max(1.0);
            t[k] = theta[k] + h;
            let plus = f(&t);
            t[k] = theta[k] - h;
            let minus = f(&t);
            t[k] = theta[k];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Small noisy instance with perturbed poses, for derivative checks.
pub fn small_instance(
    seed: u64,
    cameras: usize,
    points: usize,
) -> (SynthScene, gsfm_core::scene::Scene) {
    let s = generate(&SynthConfig {
        num_cameras: cameras,
        num_points: points,
        pixel_noise_sigma: 1.0,
        visibility_fraction: 0.8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let init = perturb(
        &s.observed,
        &Perturbation {
            rot_deg: 1.0,
            center_frac: 0.01,
            focal_frac: 0.02,
            point_frac: 0.01,
        },
        seed ^ 0x5eed,
    );
    (s, init)
}

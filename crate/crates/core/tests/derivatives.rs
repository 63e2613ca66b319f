mod common;

use common::*;
use gsfm_core::ba::{ba_cost, ba_jacobian, ba_residuals, BaOptions, BaProblem};
use gsfm_core::gp::{fix_gauge, gp_cost, gp_jacobian, gp_residuals, make_rays, GpOptions};
use gsfm_core::lm::LeastSquaresProblem;
use gsfm_core::scene::RobustLoss;
use gsfm_core::sparse_block::jtr;
use gsfm_core::synth_metrics::{Alignment, AlignmentKind};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scales each pose quaternion so the Jacobian is exercised off the unit sphere.
fn scale_quaternions(problem: &BaProblem, theta: &mut [f64], rng: &mut ChaCha8Rng) {
    for i in 0..problem.scene().cameras.len() {
        let s = rng.gen_range(0.5..2.0);
        let o = problem.layout().param(i).offset;
        theta[o..o + 4].iter_mut().for_each(|v| *v *= s);
    }
}

#[test]
fn ba_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in 0..20 {
        let (_, init) = small_instance(seed, 3 + seed as usize % 4, 10 + seed as usize);
        let problem = BaProblem::new(init, BaOptions::default()).unwrap();
        let mut theta = problem.encode();
        scale_quaternions(&problem, &mut theta, &mut rng);
        let analytic = dense_jacobian(&ba_jacobian(&problem, &theta));
        let m = analytic.nrows();
        let numeric = numeric_jacobian(&theta, m, |t| ba_residuals(&problem, t));
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn huber_jacobian_is_weighted_trivial_jacobian() {
    let (_, init) = small_instance(3, 4, 20);
    let trivial = BaProblem::new(init.clone(), BaOptions::default()).unwrap();
    let huber =
        BaProblem::new(init, BaOptions::with_loss(RobustLoss::huber(1.0).unwrap())).unwrap();
    let theta = trivial.encode();
    let r = ba_residuals(&trivial, &theta);
    let jt = dense_jacobian(&ba_jacobian(&trivial, &theta));
    let jh = dense_jacobian(&ba_jacobian(&huber, &theta));
    let mut downweighted = 0;
    for k in 0..r.len() / 2 {
        let s = r[2 * k] * r[2 * k] + r[2 * k + 1] * r[2 * k + 1];
        let sw = if s <= 1.0 {
            1.0
        } else {
            (1.0 / s.sqrt()).sqrt()
        };
        downweighted += usize::from(s > 1.0);
        for row in [2 * k, 2 * k + 1] {
            for c in 0..jt.ncols() {
                assert!(
                    (jh[(row, c)] - sw * jt[(row, c)]).abs() <= 1e-12 * jt[(row, c)].abs().max(1.0)
                );
            }
        }
    }
    assert!(downweighted > 0);
}

#[test]
fn ba_gradient_matches_cost_derivative() {
    for seed in 0..5 {
        let (_, init) = small_instance(100 + seed, 3, 8);
        for loss in [RobustLoss::Trivial, RobustLoss::huber(1.0).unwrap()] {
            let problem = BaProblem::new(init.clone(), BaOptions::with_loss(loss)).unwrap();
            let theta = problem.encode();
            let g = jtr(
                &ba_jacobian(&problem, &theta),
                &ba_residuals(&problem, &theta),
            )
            .unwrap();
            let fd = numeric_gradient(&theta, |t| ba_cost(&problem, t));
            let g_inf = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let diff = g
                .iter()
                .zip(&fd)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(
                diff / (1.0 + g_inf) < 1e-4,
                "seed {seed} {loss:?}: {diff:e} vs {g_inf:e}"
            );
        }
    }
}

#[test]
fn ba_cost_is_similarity_invariant() {
    let (_, init) = small_instance(7, 5, 25);
    let problem = BaProblem::new(init.clone(), BaOptions::default()).unwrap();
    let t = Alignment {
        kind: AlignmentKind::Sim3,
        rotation: UnitQuaternion::from_euler_angles(0.4, -1.2, 2.0),
        translation: Vector3::new(3.0, -7.0, 0.5),
        scale: 3.7,
    };
    let moved = t.apply(&init);
    let before = ba_cost(&problem, &problem.encode());
    let after = ba_cost(&problem, &problem.encode_scene(&moved));
    assert!(
        (before - after).abs() <= 1e-9 * before.max(1.0),
        "{before} vs {after}"
    );
    assert_ne!(problem.encode(), problem.encode_scene(&moved));
}

fn gp_theta(problem: &gsfm_core::gp::GpProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = problem.layout().total_params();
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn gp_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let (s, _) = small_instance(200 + seed, 3 + seed as usize % 3, 8 + seed as usize);
        let depth_mode = seed % 2 == 1;
        let options = GpOptions {
            depth_mode,
            ..GpOptions::default()
        };
        // without the gauge so every block is a true derivative
        let problem = make_rays(&s.observed, &options).unwrap();
        let theta = gp_theta(&problem, &mut rng);
        let analytic = dense_jacobian(&gp_jacobian(&problem, &theta));
        let numeric = numeric_jacobian(&theta, analytic.nrows(), |t| gp_residuals(&problem, t));
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

#[test]
fn gp_gauge_masks_first_center_only() {
    let (s, _) = small_instance(1, 4, 10);
    let problem = fix_gauge(make_rays(&s.observed, &GpOptions::default()).unwrap()).unwrap();
    let theta = problem.initial_parameters().to_vec();
    let j = dense_jacobian(&gp_jacobian(&problem, &theta));
    for c in 0..j.ncols() {
        let zero = j.column(c).iter().all(|v| *v == 0.0);
        assert_eq!(zero, c < 3, "column {c}");
    }
}

#[test]
fn gp_cost_invariances() {
    let (s, _) = small_instance(9, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plain = make_rays(&s.observed, &GpOptions::default()).unwrap();
    let mut theta = gp_theta(&plain, &mut rng);
    let positions = 3 * (s.observed.cameras.len() + s.observed.points.len());
    theta[positions..]
        .iter_mut()
        .for_each(|d| *d = d.abs() + 0.1);
    let base = gp_residuals(&plain, &theta);

    let shifted: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, v)| if k < positions { v + 5.0 } else { *v })
        .collect();
    let r = gp_residuals(&plain, &shifted);
    for (a, b) in r.iter().zip(&base) {
        assert!((a - b).abs() < 1e-9);
    }

    let scaled: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, v)| if k < positions { 2.0 * v } else { 0.5 * v })
        .collect();
    assert!((gp_cost(&plain, &scaled) - gp_cost(&plain, &theta)).abs() < 1e-9);

    let depth = make_rays(
        &s.observed,
        &GpOptions {
            depth_mode: true,
            ..GpOptions::default()
        },
    )
    .unwrap();
    let dt = theta[..positions].to_vec();
    let doubled: Vec<f64> = dt.iter().map(|v| 2.0 * v).collect();
    assert!((gp_cost(&depth, &doubled) - gp_cost(&depth, &dt)).abs() > 1e-3);
}

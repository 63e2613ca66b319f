use gsfm_core::scene::Scene;
use gsfm_core::synth_metrics::{
    align, center_rmse, generate, perturb, reproj_rmse, reproj_rmse_where, rotation_auc, Alignment,
    AlignmentKind, MetricsError, Perturbation, SynthConfig,
};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scene(seed: u64, cameras: usize) -> Scene {
    generate(&SynthConfig {
        num_cameras: cameras,
        num_points: 30,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .truth
}

fn random_sim3(rng: &mut ChaCha8Rng, kind: AlignmentKind) -> Alignment {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    Alignment {
        kind,
        rotation: UnitQuaternion::from_scaled_axis(axis * 3.0),
        translation: Vector3::new(
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
        ),
        scale: match kind {
            AlignmentKind::Sim3 => rng.gen_range(0.2..5.0),
            AlignmentKind::Se3 => 1.0,
        },
    }
}

#[test]
fn sim3_alignment_undoes_a_known_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..10 {
        let truth = scene(seed, 8);
        let t = random_sim3(&mut rng, AlignmentKind::Sim3);
        let moved = t.apply(&truth);
        let (a, aligned) = align(&moved, &truth, AlignmentKind::Sim3).unwrap();
        assert!((a.scale * t.scale - 1.0).abs() < 1e-10);
        assert!(center_rmse(&aligned, &truth) < 1e-9 * truth.diameter());
        for (x, y) in aligned.cameras.iter().zip(&truth.cameras) {
            assert!(x.rotation.angle_to(&y.rotation) < 1e-9);
        }
        for (x, y) in aligned.points.iter().zip(&truth.points) {
            assert!((x.position - y.position).norm() < 1e-9 * truth.diameter());
        }
    }
}

#[test]
fn alignment_beats_random_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth = scene(3, 10);
    let noisy = perturb(
        &truth,
        &Perturbation {
            rot_deg: 2.0,
            center_frac: 0.1,
            ..Perturbation::default()
        },
        4,
    );
    for kind in [AlignmentKind::Sim3, AlignmentKind::Se3] {
        let (best, aligned) = align(&noisy, &truth, kind).unwrap();
        let optimum = center_rmse(&aligned, &truth);
        assert!(optimum <= center_rmse(&noisy, &truth));
        for _ in 0..100 {
            let other = random_sim3(&mut rng, kind);
            assert!(optimum <= center_rmse(&other.apply(&noisy), &truth) + 1e-12);
        }
        // small nudges around the optimum do not improve it either
        for eps in [1e-4, -1e-4] {
            let mut nudged = best;
            nudged.translation.x += eps;
            nudged.scale *= 1.0
                + if kind == AlignmentKind::Sim3 {
                    eps
                } else {
                    0.0
                };
            assert!(optimum <= center_rmse(&nudged.apply(&noisy), &truth) + 1e-12);
        }
    }
}

#[test]
fn alignment_needs_three_cameras() {
    let two = scene(0, 2);
    for kind in [AlignmentKind::Sim3, AlignmentKind::Se3] {
        assert_eq!(
            align(&two, &two, kind).unwrap_err(),
            MetricsError::InsufficientCameras { needed: 3, got: 2 }
        );
    }
    assert!(matches!(
        align(&scene(0, 3), &scene(0, 4), AlignmentKind::Sim3),
        Err(MetricsError::CameraCountMismatch { .. })
    ));
}

#[test]
fn reprojection_rmse_of_exact_and_shifted_scenes() {
    let exact = scene(5, 6);
    assert!(reproj_rmse(&exact).unwrap() < 1e-9);
    let mut shifted = exact.clone();
    for o in &mut shifted.observations {
        o.pixel.x += 3.0;
        o.pixel.y -= 4.0;
    }
    assert!((reproj_rmse(&shifted).unwrap() - 5.0).abs() < 1e-9);
    assert_eq!(
        reproj_rmse_where(&shifted, |_| false).unwrap_err(),
        MetricsError::EmptyProblem
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rotation_auc_ignores_global_motion(
        seed in 0u64..1000,
        ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
        scale in 0.1f64..10.0,
    ) {
        let truth = scene(seed, 6);
        let estimate = perturb(&truth, &Perturbation { rot_deg: 3.0, ..Perturbation::default() }, seed + 1);
        let moved = Alignment {
            kind: AlignmentKind::Sim3,
            rotation: UnitQuaternion::from_scaled_axis(Vector3::new(ax, ay, az)),
            translation: Vector3::new(ay, az, ax),
            scale,
        }
        .apply(&estimate);
        let thresholds = [1.0, 3.0, 5.0, 10.0];
        let before = rotation_auc(&estimate, &truth, &thresholds);
        let after = rotation_auc(&moved, &truth, &thresholds);
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a - b).abs() < 1e-7);
            prop_assert!((0.0..=100.0).contains(a));
        }
        // recall is monotone in the threshold
        prop_assert!(before.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }
}

//! Property tests over the public API.

use groundpose::p1p::{self, CaseId};
use groundpose::ransac::{self, P1pSolver, P3pSolver};
use groundpose::refine::{shape_point, tukey, tukey_weight, ShapeCoeffs};
use groundpose::synthbench::{
    aggregate, generate, rotation_error, run_experiment_with, translation_error, BenchOptions,
    Experiment, Method, SolverKind, SynthConfig,
};
use groundpose::{Pose, RansacConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn method(s: &str) -> Method {
    s.parse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ransac_is_deterministic_and_sound(trial in 0usize..10_000, seed in any::<u64>(), p3p in any::<bool>()) {
        let s = generate(&SynthConfig { n_points: 80, ..SynthConfig::default() }, trial).unwrap();
        let cfg = RansacConfig { seed, max_iterations: 200, ..RansacConfig::default() };
        let run = || if p3p {
            ransac::run(&s.corrs, &s.scene, &P3pSolver, &cfg)
        } else {
            ransac::run(&s.corrs, &s.scene, &P1pSolver { footprint: s.box3d }, &cfg)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        if let Ok(r) = a {
            prop_assert!(r.iterations_run <= cfg.max_iterations);
            prop_assert!(r.inlier_ids.windows(2).all(|w| w[0] < w[1]));
            for id in &r.inlier_ids {
                let c = s.corrs.get(*id).expect("known id");
                let e = ransac::reprojection_error(&r.pose, &s.scene.intrinsics, c);
                prop_assert!(e < cfg.inlier_threshold_px);
            }
            // The reported set is exactly the recount under the returned pose.
            let all = ransac::inliers(&r.pose, &s.scene.intrinsics, &s.corrs, cfg.inlier_threshold_px);
            prop_assert_eq!(all, r.inlier_ids);
        }
    }

    #[test]
    fn p1p_survivors_respect_case_ranges(trial in 0usize..10_000) {
        let s = generate(&SynthConfig { n_points: 20, ..SynthConfig::default() }, trial).unwrap();
        let (k, g) = (&s.scene.intrinsics, &s.scene.ground);
        for corr in s.corrs.iter() {
            let Ok(sols) = p1p::solve_all(corr, &s.bbox, &s.box3d, k, g) else { continue };
            for sol in sols {
                prop_assert!(sol.depth > 0.0);
                prop_assert!(p1p::in_range(sol.yaw, sol.case.yaw_range(), p1p::RANGE_TOL));
                let m = sol.pose.rotation.matrix();
                prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).norm() < 1e-9);
                prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generator_is_a_function_of_seed_and_trial(seed in any::<u64>(), trial in 0usize..1000, ratio in 0.0f64..0.95) {
        let cfg = SynthConfig { seed, outlier_ratio: ratio, n_points: 50, ..SynthConfig::default() };
        let (a, b) = (generate(&cfg, trial).unwrap(), generate(&cfg, trial).unwrap());
        prop_assert_eq!(a.gt_pose, b.gt_pose);
        prop_assert_eq!(a.corrs.as_slice(), b.corrs.as_slice());
        prop_assert_eq!(a.corrs.len(), cfg.n_points);
        let outliers = a.inlier_mask.iter().filter(|m| !**m).count();
        prop_assert_eq!(outliers, cfg.n_outliers());
    }

    #[test]
    fn metric_sanity(trial in 0usize..1000, w in prop::array::uniform3(-3.0f64..3.0), dt in prop::array::uniform3(-2.0f64..2.0)) {
        let s = generate(&SynthConfig::default(), trial).unwrap();
        let gt = s.gt_pose;
        let est = gt.perturbed(&Vector3::from(w), &Vector3::from(dt));
        let e_r = rotation_error(&est.rotation, &gt.rotation);
        let e_t = translation_error(&est.translation, &gt.translation).unwrap();
        prop_assert!((0.0..=180.0).contains(&e_r));
        prop_assert!(e_t >= 0.0 && e_t.is_finite());
        prop_assert_eq!(rotation_error(&gt.rotation, &gt.rotation), 0.0);
        prop_assert_eq!(translation_error(&gt.translation, &gt.translation).unwrap(), 0.0);
    }
}

proptest! {
    #[test]
    fn tukey_is_bounded_monotone_and_continuous(a in 0.0f64..20.0, b in 0.0f64..20.0, c in 0.1f64..15.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert_eq!(tukey(0.0, c), 0.0);
        prop_assert!(tukey(lo, c) <= tukey(hi, c) + 1e-15);
        prop_assert!(tukey(hi, c) <= c * c / 6.0 + 1e-12);
        let w = tukey_weight(hi, c);
        prop_assert!((0.0..=1.0).contains(&w));
        if hi > c {
            prop_assert_eq!(w, 0.0);
        }
        let eps = 1e-9 * c;
        prop_assert!((tukey(c - eps, c) - tukey(c + eps, c)).abs() < 1e-12 * c * c);
        prop_assert!(tukey_weight(c - eps, c) < 1e-15);
    }

    #[test]
    fn shape_points_are_affine_in_the_coefficients(trial in 0usize..1000, l in prop::collection::vec(-2.0f64..2.0, 3), m in prop::collection::vec(-2.0f64..2.0, 3)) {
        let s = generate(&SynthConfig { shape_modes: 3, n_points: 10, ..SynthConfig::default() }, trial).unwrap();
        let model = s.shape.unwrap();
        let mid: Vec<f64> = l.iter().zip(&m).map(|(a, b)| 0.5 * (a + b)).collect();
        for i in 0..model.len() {
            let p = shape_point(&model, &ShapeCoeffs(l.clone()), i).unwrap();
            let q = shape_point(&model, &ShapeCoeffs(m.clone()), i).unwrap();
            let r = shape_point(&model, &ShapeCoeffs(mid.clone()), i).unwrap();
            prop_assert!((0.5 * (p + q) - r).norm() < 1e-12);
        }
    }

    #[test]
    fn case_ranges_partition_the_circle(yaw in -std::f64::consts::PI..std::f64::consts::PI) {
        let hits = CaseId::ALL
            .into_iter()
            .filter(|c| p1p::in_range(yaw, c.yaw_range(), 0.0))
            .count();
        let on_boundary = [0.0, std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2]
            .iter()
            .any(|b| (yaw - b).abs() < 1e-12);
        prop_assert!(hits == 1 || (on_boundary && hits == 2));
        prop_assert!(p1p::in_range(yaw, CaseId::for_yaw(yaw).yaw_range(), 0.0));
    }
}

#[test]
fn exp_roundtrip_through_pose_composition() {
    let p = Pose::identity().perturbed(&Vector3::new(0.3, -0.2, 0.1), &Vector3::new(1.0, 2.0, 3.0));
    let q = p * p.inverse();
    assert!((q.rotation.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-12);
    assert!(q.translation.norm() < 1e-12);
}

#[test]
fn e1_iterations_grow_with_outlier_ratio() {
    let cfg = SynthConfig {
        n_trials: 200,
        seed: 21,
        ..SynthConfig::default()
    };
    let settings: Vec<f64> = (1..=8).map(|i| 10.0 * f64::from(i)).collect();
    let recs = run_experiment_with(
        Experiment::E1,
        &settings,
        &[method("p1p"), method("p3p")],
        &cfg,
        &BenchOptions::default(),
    )
    .unwrap();
    let sums = aggregate(&recs);
    for solver in [SolverKind::P1p, SolverKind::P3p] {
        let means: Vec<f64> = sums
            .iter()
            .filter(|s| s.method.solver == solver)
            .map(|s| s.mean_iterations)
            .collect();
        // Slack for Monte-Carlo noise between neighbouring settings.
        for w in means.windows(2) {
            assert!(w[1] >= 0.9 * w[0], "{solver:?}: {means:?}");
        }
        assert!(
            means[means.len() - 1] > 2.0 * means[0],
            "{solver:?}: {means:?}"
        );
    }
}

#[test]
fn pitch_error_reverses_the_solver_ordering() {
    let cfg = SynthConfig {
        n_trials: 200,
        seed: 22,
        ..SynthConfig::default()
    };
    let recs = run_experiment_with(
        Experiment::E3,
        &[0.0, 5.0],
        &[method("p1p+gn"), method("p3p+gn")],
        &cfg,
        &BenchOptions::default(),
    )
    .unwrap();
    let sums = aggregate(&recs);
    let e = |setting: f64, m: &str| {
        sums.iter()
            .find(|s| s.setting == setting && s.method.to_string() == m)
            .unwrap()
            .mean_e_r_deg
    };
    assert!(e(0.0, "p1p+gn") <= e(0.0, "p3p+gn"), "{sums:?}");
    assert!(e(5.0, "p1p+gn") > e(5.0, "p3p+gn"), "{sums:?}");
}

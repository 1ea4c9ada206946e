use approx::assert_relative_eq;
use optbp::analysis::*;
use optbp::nonlinearity::*;
use optbp::{Rng, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn sa_is_odd_and_monotone(e in -20.0f64..20.0, a0 in 0.0f64..60.0, de in 1e-3f64..1.0) {
        prop_assert!((sa_forward(-e, a0) + sa_forward(e, a0)).abs() < 1e-12);
        prop_assert!(sa_forward(e + de, a0) > sa_forward(e, a0));
        prop_assert!(sa_derivative_exact(e, a0) > 0.0);
    }

    #[test]
    fn gs_is_odd_and_monotone_below_four(e in -20.0f64..20.0, g0 in 0.0f64..4.0, de in 1e-3f64..1.0) {
        prop_assert!((gs_forward(-e, g0) + gs_forward(e, g0)).abs() < 1e-12);
        prop_assert!(gs_forward(e + de, g0) > gs_forward(e, g0));
    }

    #[test]
    fn optical_never_exceeds_exact(e in -20.0f64..20.0, a0 in 0.0f64..60.0) {
        prop_assert!(sa_derivative_optical(e, a0) <= sa_derivative_exact(e, a0));
        prop_assert!(sa_derivative_optical(e, a0) > 0.0 && sa_derivative_optical(e, a0) <= 1.0);
    }

    #[test]
    fn gain_optical_dominates_exact(e in -20.0f64..20.0, g0 in 0.0f64..50.0) {
        prop_assert!(gs_derivative_optical(e, g0) >= gs_derivative_exact(e, g0));
    }

    #[test]
    fn zero_depth_is_identity(e in -50.0f64..50.0) {
        prop_assert_eq!(sa_forward(e, 0.0), e);
        prop_assert_eq!(gs_forward(e, 0.0), e);
        prop_assert_eq!(sa_derivative_exact(e, 0.0), 1.0);
        prop_assert_eq!(sa_derivative_optical(e, 0.0), 1.0);
    }

    #[test]
    fn random_derivative_shape(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t = random_derivative(&mut rng, 16, 10.0, None).unwrap();
        for i in 0..=400 {
            let z = -12.0 + 24.0 * i as f64 / 400.0;
            prop_assert!((t.eval(z) - t.eval(-z)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&t.eval(z)));
        }
    }
}

#[test]
fn similarity_is_scale_invariant() {
    let cfg = SimilarityConfig::for_alpha(30.0).unwrap();
    let f = |z| sa_derivative_optical(z, 30.0);
    let s = similarity(f, &cfg).unwrap();
    for c in [0.1, 2.5, 10.0] {
        assert!((similarity(|z| c * f(z), &cfg).unwrap() - s).abs() < 1e-10);
    }
    let mut rng = Rng::new(3);
    let t = random_derivative(&mut rng, 16, cfg.half_range, None).unwrap();
    let s = similarity(|z| t.eval(z), &cfg).unwrap();
    for c in [0.1, 2.5, 10.0] {
        assert!((similarity(|z| c * t.eval(z), &cfg).unwrap() - s).abs() < 1e-10);
    }
}

#[test]
fn quadrature_converges() {
    for a0 in [1.0, 10.0, 30.0, 50.0] {
        let coarse = SimilarityConfig::for_alpha(a0).unwrap();
        let fine = SimilarityConfig { points: 4001, ..coarse };
        let f = |z| sa_derivative_optical(z, a0);
        let d = (similarity(f, &coarse).unwrap() - similarity(f, &fine).unwrap()).abs();
        assert!(d < 1e-6, "α₀={a0}: {d}");
    }
}

#[test]
fn optical_error_saturates() {
    let curve = optical_error_curve(&[1.0, 5.0, 10.0, 30.0, 50.0]).unwrap();
    for w in curve.windows(2) {
        assert!(w[1].error >= w[0].error, "{:?}", curve);
    }
    let at = |a0: f64| curve.iter().find(|p| p.alpha0 == a0).unwrap().error;
    assert!((at(30.0) - 0.10).abs() <= 0.05, "{}", at(30.0));
    assert!(at(50.0) <= 0.15);
}

#[test]
fn gain_bound_inequality() {
    let mut rng = Rng::new(17);
    for _ in 0..100 {
        let w = Tensor::<f64>::from_fn(vec![10, 10], |_| rng.normal(0.0, 1.0));
        let r = gain_bounds(&w).unwrap();
        assert!(r.lower <= r.upper * (1.0 + 1e-12), "{r:?}");
    }
}

#[test]
fn gain_upper_matches_svd() {
    let mut rng = Rng::new(23);
    for trial in 0..60 {
        let m = 1 + trial % 8;
        let n = 1 + (trial / 8) % 8;
        let w = Tensor::<f64>::from_fn(vec![m, n], |_| rng.normal(0.0, 1.0));
        let svd = nalgebra::DMatrix::from_row_slice(m, n, w.data()).svd(false, false);
        let s_max = svd.singular_values.max();
        let r = gain_bounds(&w).unwrap();
        assert_relative_eq!(r.upper, s_max * s_max, max_relative = 1e-6);
    }
}

#[test]
fn random_derivative_is_reproducible() {
    let a = random_derivative(&mut Rng::new(9), 16, 10.0, None).unwrap();
    let b = random_derivative(&mut Rng::new(9), 16, 10.0, None).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.grid(), b.grid());
    assert!(random_derivative(&mut Rng::new(9), 3, 10.0, None).is_err());
}

#[test]
fn random_derivatives_cover_error_axis() {
    let sim = SimilarityConfig::for_alpha(10.0).unwrap();
    let master = Rng::new(2024);
    let mut errors = Vec::new();
    for (i, target) in error_grid(0.01, 0.51, 200).into_iter().enumerate() {
        let mut rng = master.derive(i as u64);
        let t = random_derivative(&mut rng, 16, sim.half_range, Some(&TargetError::new(target, sim))).unwrap();
        let e = approximation_error(|z| t.eval(z), &sim).unwrap();
        assert!((e - target).abs() < 0.01);
        errors.push(e);
    }
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = errors.iter().copied().fold(0.0, f64::max);
    assert!(lo <= 0.02 && hi >= 0.5, "span [{lo}, {hi}]");
}

#[test]
fn unreachable_target_exhausts_budget() {
    let sim = SimilarityConfig::for_alpha(10.0).unwrap();
    let target = TargetError { budget: 50, ..TargetError::new(2.0, sim) };
    let r = random_derivative(&mut Rng::new(1), 16, sim.half_range, Some(&target));
    assert!(matches!(r, Err(optbp::Error::SearchFailure(_))));
}

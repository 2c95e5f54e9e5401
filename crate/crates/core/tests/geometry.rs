mod common;

use common::*;
use ellembed::bures::{
    bures_sq, grad_bures_factor, newton_schulz, polarization, transport_map, w2_sq, DEFAULT_NS_EPS, DEFAULT_NS_ITERS,
};
use ellembed::optim::{AdagradState, SgdState, ADAGRAD_EPS};
use ellembed::sampling::{random_factor, random_spd};
use ellembed::{EllipticalPoint, GradientPair, MapFormula};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn newton_schulz_roots_are_consistent(seed in any::<u64>(), d in 1usize..=8) {
        let m = random_spd(&mut rng(seed), d, 100.0);
        let r = newton_schulz(&m, DEFAULT_NS_ITERS, DEFAULT_NS_EPS).unwrap();
        prop_assert!(rel_err_mat(&(&r.y * &r.y), &m) < 1e-9);
        prop_assert!((&r.y * &r.z - DMatrix::identity(d, d)).norm() < 1e-8);
        prop_assert!((&r.y - r.y.transpose()).amax() == 0.0);
        prop_assert!((&r.z - r.z.transpose()).amax() == 0.0);
    }

    #[test]
    fn transport_map_pushes_a_onto_b(seed in any::<u64>(), d in 1usize..=16) {
        let mut g = rng(seed);
        let a = random_spd(&mut g, d, 100.0);
        let b = random_spd(&mut g, d, 100.0);
        let t = transport_map(&a, &b, MapFormula::Primal, DEFAULT_NS_ITERS).unwrap().t;
        prop_assert!(rel_err_mat(&(&t * &a * &t), &b) < 1e-6);
        let alt = transport_map(&a, &b, MapFormula::Alternative, DEFAULT_NS_ITERS).unwrap().t;
        prop_assert!((&alt - &t).amax() < 1e-6);
    }

    #[test]
    fn bures_is_symmetric_and_homogeneous(seed in any::<u64>(), d in 1usize..=8, s in 0.1f64..10.0) {
        let mut g = rng(seed);
        let a = random_spd(&mut g, d, 100.0);
        let b = random_spd(&mut g, d, 100.0);
        let ab = bures_sq(&a, &b, DEFAULT_NS_ITERS).unwrap();
        let ba = bures_sq(&b, &a, DEFAULT_NS_ITERS).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        let scaled = bures_sq(&(&a * s), &(&b * s), DEFAULT_NS_ITERS).unwrap();
        prop_assert!((scaled - s * ab).abs() <= 1e-8 * (s * ab).max(1.0));
        prop_assert!(bures_sq(&a, &a, DEFAULT_NS_ITERS).unwrap() < 1e-10 * a.trace());
    }

    #[test]
    fn wasserstein_satisfies_the_triangle_inequality(seed in any::<u64>(), d in 1usize..=6) {
        let mut g = rng(seed);
        let p: Vec<EllipticalPoint> = (0..3).map(|_| random_point(&mut g, d, 0.01)).collect();
        let w = |i: usize, j: usize| w2_sq(&p[i], &p[j]).unwrap().max(0.0).sqrt();
        prop_assert!(w(0, 2) <= w(0, 1) + w(1, 2) + 1e-7);
        prop_assert!(w(0, 1) <= w(0, 2) + w(2, 1) + 1e-7);
    }

    #[test]
    fn polarization_matches_the_distance_identity(seed in any::<u64>(), d in 1usize..=6, uniform in any::<bool>()) {
        let mut g = rng(seed);
        let make = |g: &mut ChaCha8Rng| {
            let p = random_point(g, d, 0.01);
            if uniform { EllipticalPoint::uniform(p.mean, p.factor, p.epsilon).unwrap() } else { p }
        };
        let (alpha, beta) = (make(&mut g), make(&mut g));
        let origin = EllipticalPoint::dirac(DVector::zeros(d), alpha.tau).unwrap();
        let expected = 0.5
            * (w2_sq(&alpha, &origin).unwrap() + w2_sq(&beta, &origin).unwrap() - w2_sq(&alpha, &beta).unwrap());
        prop_assert!((polarization(&alpha, &beta).unwrap() - expected).abs() < 1e-7);
    }

    #[test]
    fn adagrad_accumulators_never_decrease(seed in any::<u64>(), d in 1usize..=4) {
        let mut g = rng(seed);
        let mut params = vec![random_point(&mut g, d, 0.01), random_point(&mut g, d, 0.01)];
        let mut opt = AdagradState::new(&params, 0.05, ADAGRAD_EPS);
        let target = random_spd(&mut g, d, 10.0);
        for _ in 0..5 {
            let before = (opt.accum_mean.clone(), opt.accum_factor.clone());
            let grads: Vec<GradientPair> = params
                .iter()
                .map(|p| GradientPair {
                    d_mean: p.mean.clone(),
                    d_factor: grad_bures_factor(&p.factor, &target, p.epsilon, DEFAULT_NS_ITERS).unwrap(),
                })
                .collect();
            opt.step(&mut params, &grads).unwrap();
            for (old, new) in before.0.iter().zip(&opt.accum_mean) {
                prop_assert!(old.iter().zip(new.iter()).all(|(a, b)| b >= a));
            }
            for (old, new) in before.1.iter().zip(&opt.accum_factor) {
                prop_assert_eq!(old.shape(), new.shape());
                prop_assert!(old.iter().zip(new.iter()).all(|(a, b)| b >= a));
            }
        }
    }
}

#[test]
fn factor_sgd_descends_on_the_bures_objective() {
    let eps = 0.01;
    let mut g = rng(11);
    for _ in 0..10 {
        let target = random_spd(&mut g, 3, 10.0);
        let start = random_factor(&mut g, 3, 3, 10.0);
        let loss = |l: &DMatrix<f64>| {
            0.5 * bures_sq(&(l * l.transpose() + DMatrix::identity(3, 3) * eps), &target, DEFAULT_NS_ITERS).unwrap()
        };
        let mut params = vec![EllipticalPoint::gaussian(DVector::zeros(3), start, eps).unwrap()];
        let initial = loss(&params[0].factor);
        let sgd = SgdState::new(0.1).unwrap();
        for _ in 0..200 {
            let d_factor = grad_bures_factor(&params[0].factor, &target, eps, DEFAULT_NS_ITERS).unwrap();
            sgd.step(&mut params, &[GradientPair { d_mean: DVector::zeros(3), d_factor }]).unwrap();
        }
        let last = loss(&params[0].factor);
        assert!(last <= 0.01 * initial, "loss {initial} -> {last}");
    }
}

#[test]
fn gradient_shapes_follow_the_factor() {
    let mut g = rng(12);
    for k in 0..=4 {
        let l = random_factor(&mut g, 4, k, 10.0);
        let b = random_spd(&mut g, 4, 10.0);
        let grad = grad_bures_factor(&l, &b, 0.01, DEFAULT_NS_ITERS).unwrap();
        assert_eq!(grad.shape(), l.shape());
    }
}

//! Property-based invariants: bilinearity and symmetry of the perturbation
//! field, O(2) invariance of the energy, and the alignment pseudometric.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::f64::consts::PI;

use cylgeo::metric::eval_h;
use cylgeo::reduction::great_circle;
use cylgeo::{
    align, energy, AmbientPoint, CircleParam, DiscreteLoop, FormTerm, PerturbationForm,
    ProfileSpec, TangentVector,
};

fn test_form() -> PerturbationForm {
    PerturbationForm::odd_decay_diag(2, &[1.0, 0.8, 0.6]).unwrap()
}

fn unit3(a: f64, b: f64, c: f64) -> DVector<f64> {
    let mut v = DVector::from_vec(vec![a, b, c]);
    let n = v.norm();
    if n < 1e-9 {
        v = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    } else {
        v /= n;
    }
    v
}

fn noisy_loop(seed: u64, amp: f64) -> DiscreteLoop {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let m = 24;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (p, q) = cylgeo::reduction::random_stiefel(2, &mut rng);
    let z = great_circle(
        &CircleParam {
            r: rng.gen_range(-1.0..1.0),
            p,
            q,
        },
        m,
    )
    .unwrap();
    let noise = DVector::from_fn(m * 4, |_, _| rng.gen_range(-amp..amp));
    let dir = z.project_tangent(&noise);
    z.retract(&dir, 1.0).unwrap()
}

proptest! {
    #[test]
    fn eval_h_is_symmetric_and_bilinear(
        s in -3.0f64..3.0,
        ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
        c in -2.0f64..2.0,
    ) {
        let form = test_form();
        let xi = unit3(ax, ay, az.abs() + 0.1);
        let pt = AmbientPoint::new(s, xi.clone()).unwrap();
        // tangent vectors at (s, xi): eta orthogonal to xi
        let raw1 = DVector::from_vec(vec![ay, az, ax + 0.3]);
        let raw2 = DVector::from_vec(vec![az, ax, ay - 0.2]);
        let proj = |raw: &DVector<f64>| raw - xi.dot(raw) * &xi;
        let v = TangentVector::new(0.1, proj(&raw1));
        let w = TangentVector::new(-0.2, proj(&raw2));
        let vw = eval_h(&pt, &v, &w, &form).unwrap();
        let wv = eval_h(&pt, &w, &v, &form).unwrap();
        prop_assert!((vw - wv).abs() <= 1e-12 * vw.abs().max(1.0));
        // linearity in the first slot
        let cv = TangentVector::new(c * 0.1, proj(&raw1) * c);
        let cvw = eval_h(&pt, &cv, &w, &form).unwrap();
        prop_assert!((cvw - c * vw).abs() <= 1e-11 * vw.abs().max(1.0));
    }

    #[test]
    fn energy_is_o2_invariant(seed in 0u64..200, shift in 0usize..24, reflect in any::<bool>()) {
        let form = test_form();
        let lp = noisy_loop(seed, 0.2);
        let e0 = energy(&lp, &form, 0.02).unwrap();
        let e1 = energy(&lp.o2_act(shift, reflect).unwrap(), &form, 0.02).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-14 * e0.abs());
    }

    #[test]
    fn align_is_symmetric_and_orbit_invariant(
        seed_a in 0u64..100, seed_b in 100u64..200,
        shift in 0usize..24, reflect in any::<bool>(),
    ) {
        let a = noisy_loop(seed_a, 0.1);
        let b = noisy_loop(seed_b, 0.1);
        let dab = align(&a, &b).unwrap().distance;
        let dba = align(&b, &a).unwrap().distance;
        prop_assert!((dab - dba).abs() <= 1e-10);
        // moving one loop along its orbit leaves the distance unchanged
        let moved = a.o2_act(shift, reflect).unwrap();
        let dmb = align(&moved, &b).unwrap().distance;
        prop_assert!((dab - dmb).abs() <= 1e-10);
        // identity of indiscernibles on the orbit
        let daa = align(&a, &moved).unwrap().distance;
        prop_assert!(daa <= 1e-12);
    }

    #[test]
    fn retraction_preserves_constraints(seed in 0u64..100, step in -0.5f64..0.5) {
        let lp = noisy_loop(seed, 0.1);
        let noise = DVector::from_fn(24 * 4, |i, _| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.5);
        let dir = lp.project_tangent(&noise);
        let moved = lp.retract(&dir, step).unwrap();
        prop_assert!(moved.max_constraint_violation() <= 1e-12);
    }

    #[test]
    fn gamma_is_invariant_under_in_plane_rotation(theta in 0.0f64..(2.0 * PI), seed in 0u64..50) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let form = test_form();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = cylgeo::reduction::random_stiefel(2, &mut rng);
        let r = rng.gen_range(-2.0..2.0);
        let g0 = cylgeo::gamma(&CircleParam { r, p: p.clone(), q: q.clone() }, &form, 128);
        // rotate within the circle plane: same geometric circle
        let p2 = theta.cos() * &p + theta.sin() * &q;
        let q2 = -theta.sin() * &p + theta.cos() * &q;
        let g1 = cylgeo::gamma(&CircleParam { r, p: p2, q: q2 }, &form, 128);
        prop_assert!((g0 - g1).abs() <= 1e-11);
    }

    #[test]
    fn perturbation_blocks_must_be_symmetric(a in 0.1f64..2.0) {
        let mut block = DMatrix::zeros(4, 4);
        block[(1, 2)] = a; // asymmetric entry
        let res = PerturbationForm::new(2, vec![FormTerm {
            profile: ProfileSpec::OddDecay,
            block,
        }]);
        prop_assert!(res.is_err());
    }
}

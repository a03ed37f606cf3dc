use kbt_core::control::{
    energy, generate_samples, linearize, lqr_for, spectral_radius, step, success_rate, PendulumParams, PendulumState,
    StateSampler, SuccessCriterion,
};
use nalgebra::{DMatrix, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const Q: [f64; 4] = [1.0, 1.0, 10.0, 1.0];
const R: f64 = 0.1;

fn both() -> [PendulumParams; 2] {
    [PendulumParams::nominal(), PendulumParams::shifted()]
}

fn dyn_matrix(a: &nalgebra::Matrix4<f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(4, 4, a.iter().copied())
}

#[test]
fn rk4_conserves_energy() {
    for p in both() {
        let mut s = PendulumState { theta_p: 0.3, omega_p: 0.2, v_c: 0.1, ..Default::default() };
        let e0 = energy(&p, &s);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            s = step(&p, &s, 0.0).unwrap();
            worst = worst.max((energy(&p, &s) - e0).abs());
        }
        assert!(worst <= 1e-3 * e0.abs(), "{p:?}: drift {worst:e} of {e0}");
    }
}

#[test]
fn small_angle_trajectory_follows_linearization() {
    // closed loop keeps the state near the linearization point for both plants
    for p in both() {
        let g = lqr_for(&p, Q, R).unwrap();
        let (a, b) = linearize(&p);
        let k = Vector4::from_iterator(g.k.iter().copied());
        let mut s = PendulumState { theta_p: 0.01, ..Default::default() };
        let mut x = s.to_vector();
        for i in 0..50 {
            let u = g.action(&s);
            s = step(&p, &s, u).unwrap();
            x = a * x - b * k.dot(&x);
            let err = (s.to_vector() - x).amax();
            assert!(err <= 1e-3, "{p:?} step {i}: {err:e}");
        }
    }
    // the open-loop shifted plant diverges slowly enough to stay linear
    let p = PendulumParams::shifted();
    let (a, _) = linearize(&p);
    let mut s = PendulumState { theta_p: 0.01, ..Default::default() };
    let mut x = s.to_vector();
    for _ in 0..50 {
        s = step(&p, &s, 0.0).unwrap();
        x = a * x;
    }
    assert!((s.to_vector() - x).amax() <= 1e-3);
}

#[test]
fn finite_difference_jacobian_matches_discretization() {
    let h = 1e-6;
    for p in both() {
        let (a, b) = linearize(&p);
        let origin = PendulumState::default();
        for j in 0..4 {
            let mut plus = origin.to_array();
            let mut minus = origin.to_array();
            plus[j] += h;
            minus[j] -= h;
            let fp = step(&p, &PendulumState::from_array(plus), 0.0).unwrap().to_vector();
            let fm = step(&p, &PendulumState::from_array(minus), 0.0).unwrap().to_vector();
            let col = (fp - fm) / (2.0 * h);
            assert!((col - a.column(j)).amax() <= 1e-6, "{p:?} column {j}");
        }
        let fp = step(&p, &origin, h).unwrap().to_vector();
        let fm = step(&p, &origin, -h).unwrap().to_vector();
        assert!(((fp - fm) / (2.0 * h) - b).amax() <= 1e-6);
    }
}

#[test]
fn upright_is_open_loop_unstable_and_lqr_stabilizes_it() {
    for p in both() {
        let (a, b) = linearize(&p);
        let a = dyn_matrix(&a);
        assert!(spectral_radius(&a) > 1.0);
        let g = lqr_for(&p, Q, R).unwrap();
        let b = DMatrix::from_iterator(4, 1, b.iter().copied());
        assert!(spectral_radius(&(&a - &b * &g.k)) < 1.0);
    }
}

#[test]
fn closed_loop_reaches_the_origin() {
    for p in both() {
        let g = lqr_for(&p, Q, R).unwrap();
        let mut s = PendulumState { theta_p: 0.05, ..Default::default() };
        let mut reached = false;
        for _ in 0..500 {
            s = step(&p, &s, g.action(&s)).unwrap();
            if s.to_array().iter().all(|v| v.abs() < 0.01) {
                reached = true;
                break;
            }
        }
        assert!(reached, "{p:?} ended at {s:?}");
    }
}

#[test]
fn nominal_gain_fails_on_the_shifted_plant() {
    let crit = SuccessCriterion::default();
    let shifted = PendulumParams::shifted();
    let own = lqr_for(&shifted, Q, R).unwrap();
    let foreign = lqr_for(&PendulumParams::nominal(), Q, R).unwrap();
    let own_rate = success_rate(&shifted, &crit, |s| Ok(own.action(s))).unwrap();
    let foreign_rate = success_rate(&shifted, &crit, |s| Ok(foreign.action(s))).unwrap();
    assert_eq!(own_rate, 1.0);
    assert!(foreign_rate < own_rate, "{foreign_rate} vs {own_rate}");
    let nominal_rate = success_rate(&PendulumParams::nominal(), &crit, |s| Ok(foreign.action(s))).unwrap();
    assert_eq!(nominal_rate, 1.0);
}

#[test]
fn action_noise_has_the_requested_variance() {
    let g = lqr_for(&PendulumParams::nominal(), Q, R).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma = 0.7;
    let samples = generate_samples(&g, 10_000, &StateSampler::default(), Some(sigma), &mut rng).unwrap();
    let res: Vec<f64> = samples.iter().map(|s| s.action - g.action(&s.state)).collect();
    let mean = res.iter().sum::<f64>() / res.len() as f64;
    let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() <= 0.1, "variance {var}");

    let clean = generate_samples(&g, 100, &StateSampler::default(), None, &mut rng).unwrap();
    assert!(clean.iter().all(|s| s.action == g.action(&s.state)));
}

#[test]
fn samples_are_reproducible_and_inside_the_box() {
    let g = lqr_for(&PendulumParams::shifted(), Q, R).unwrap();
    let sampler = StateSampler::default();
    let draw = |seed| generate_samples(&g, 200, &sampler, Some(0.1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
    for s in draw(9) {
        for (v, b) in s.state.to_array().iter().zip(sampler.bounds) {
            assert!(v.abs() <= b);
        }
    }
}

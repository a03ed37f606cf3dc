//! Strategies and property bodies shared by the proptest suite and the
//! acceptance run.

#![allow(dead_code)]

use kbt_core::bayes_head::{forward, init_head, input_state, predict, HeadConfig, WeightState};
use kbt_core::linalg::{is_psd, is_symmetric};
use kbt_core::moments::{
    linear_forward_moments, relu_moments, softmax_blocks, softmax_moments, GaussianState, LinearShape,
};
use kbt_core::smoother::{backward, sequential_update, MeasurementModel, MeasurementUpdate};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub type Outcome = Result<(), TestCaseError>;

pub fn vec_of(n: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-range..range, n)
}

/// Random Gaussian of dimension `n` with covariance `A Aᵀ · scale`.
pub fn gaussian(n: usize) -> impl Strategy<Value = GaussianState> {
    (vec_of(n, 3.0), vec_of(n * n, 1.0), 1e-4..2.0f64).prop_map(move |(m, a, s)| {
        let a = DMatrix::from_vec(n, n, a);
        let cov = &a * a.transpose() * s + DMatrix::identity(n, n) * 1e-9;
        GaussianState::new(DVector::from_vec(m), cov).unwrap()
    })
}

pub fn sized_gaussian(max: usize) -> impl Strategy<Value = GaussianState> {
    (1..=max).prop_flat_map(gaussian)
}

/// Block size and a Gaussian over one to three blocks.
pub fn blocked_gaussian() -> impl Strategy<Value = (usize, GaussianState)> {
    (2usize..=5, 1usize..=3).prop_flat_map(|(b, k)| (Just(b), gaussian(b * k)))
}

pub fn linear_case() -> impl Strategy<Value = (LinearShape, GaussianState, GaussianState)> {
    (1usize..=3, 1usize..=4, 1usize..=4).prop_flat_map(|(t, ni, no)| {
        let shape = LinearShape { tokens: t, n_in: ni, n_out: no };
        (Just(shape), gaussian(shape.n_weights()), gaussian(t * ni))
    })
}

/// Head with `d` inputs and `d_o` outputs, initialized from a random `W_O`.
pub fn head(d: usize, d_o: usize, eps: f64) -> impl Strategy<Value = (HeadConfig, WeightState)> {
    vec_of((d + 1) * d_o, 2.0).prop_map(move |w| {
        let cfg = HeadConfig::new(d, d_o, eps);
        let w_o = DMatrix::from_vec(d + 1, d_o, w);
        let weights = init_head(&cfg, &w_o).unwrap();
        (cfg, weights)
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn valid(g: &GaussianState) -> bool {
    g.mean.iter().all(|v| v.is_finite()) && is_symmetric(&g.cov) && is_psd(&g.cov)
}

pub fn relu_is_valid(u: &GaussianState) -> Outcome {
    let (z, cross) = relu_moments(u).unwrap();
    prop_assert!(valid(&z));
    prop_assert_eq!(z.dim(), u.dim());
    prop_assert!(z.mean.iter().all(|m| *m >= 0.0));
    // Cov(u, relu(u)) = σ² Φ lies in [0, σ²]
    for i in 0..u.dim() {
        prop_assert!(cross[i] >= 0.0 && cross[i] <= u.cov[(i, i)] * (1.0 + 1e-12));
    }
    Ok(())
}

pub fn softmax_is_normalized(block: usize, u: &GaussianState) -> Outcome {
    let sm = softmax_moments(u, block).unwrap();
    prop_assert!(valid(&sm.p));
    for b in 0..u.dim() / block {
        let o = b * block;
        let p = sm.p.mean.rows(o, block);
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(p.as_slice()), argmax(u.mean.rows(o, block).as_slice()));
        for r in 0..u.dim() {
            let s: f64 = sm.p.cov.view((r, o), (1, block)).sum();
            prop_assert!(s.abs() <= 1e-10);
        }
    }
    Ok(())
}

pub fn linear_is_valid(shape: LinearShape, w: &GaussianState, z: &GaussianState) -> Outcome {
    let u = linear_forward_moments(w, z, shape).unwrap();
    prop_assert_eq!(u.dim(), shape.tokens * shape.n_out);
    prop_assert!(valid(&u));
    Ok(())
}

/// `tokens` rows of `h` are used.
pub fn trace_shapes(cfg: &HeadConfig, w: &WeightState, tokens: usize, h: &[f64]) -> Outcome {
    let h = DMatrix::from_row_slice(tokens, cfg.d, &h[..tokens * cfg.d]);
    let trace = forward(w, &input_state(&h, cfg).unwrap(), cfg).unwrap();
    prop_assert_eq!(trace.z.len(), cfg.layers() + 1);
    for (i, z) in trace.z.iter().enumerate() {
        let width = if i == 0 { cfg.d } else { cfg.widths[i - 1] };
        prop_assert_eq!(z.dim(), tokens * width);
        prop_assert!(valid(z));
    }
    for (i, u) in trace.u.iter().enumerate() {
        prop_assert_eq!(u.dim(), tokens * cfg.widths[i]);
    }
    Ok(())
}

/// `w_o` holds 5·6 entries and `h` 4.
pub fn init_keeps_argmax(w_o: &[f64], h: &[f64]) -> Outcome {
    let cfg = HeadConfig::new(4, 6, 1e-12);
    let w_o = DMatrix::from_column_slice(5, 6, w_o);
    let w = init_head(&cfg, &w_o).unwrap();
    let (p, _) = predict(&w, &DMatrix::from_row_slice(1, 4, h), &cfg).unwrap();
    let logits = w_o.transpose() * DVector::from_column_slice(h).push(1.0);
    prop_assert!((&p - softmax_blocks(&logits, 6)).amax() <= 1e-6);
    // ties are broken the same way only when the logits are separated
    let mut sorted: Vec<f64> = logits.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sorted[0] - sorted[1] > 1e-6 {
        prop_assert_eq!(argmax(p.as_slice()), argmax(logits.as_slice()));
    }
    Ok(())
}

pub fn zero_innovation_is_fixed(cfg: &HeadConfig, w: &WeightState, tokens: usize, h: &[f64]) -> Outcome {
    let h = DMatrix::from_row_slice(tokens, cfg.d, &h[..tokens * cfg.d]);
    let trace = forward(w, &input_state(&h, cfg).unwrap(), cfg).unwrap();
    let w2 = backward(&trace, w, trace.output().clone(), cfg).unwrap();
    for (a, b) in w.layers.iter().zip(&w2.layers) {
        prop_assert!((&a.mean - &b.mean).amax() <= 1e-10);
        prop_assert!((&a.cov - &b.cov).amax() <= 1e-10);
    }
    Ok(())
}

pub fn update_is_deterministic(cfg: &HeadConfig, w: &WeightState, h: &[f64], target: usize, sigma: f64) -> Outcome {
    let h = DMatrix::from_row_slice(1, cfg.d, h);
    let mut y = DVector::zeros(cfg.d_o);
    y[target] = 1.0;
    let m = MeasurementModel::scalar(y, sigma).unwrap();
    let a = sequential_update(w, &h, &m, cfg, MeasurementUpdate::Fuse).unwrap();
    let b = sequential_update(w, &h, &m, cfg, MeasurementUpdate::Fuse).unwrap();
    prop_assert_eq!(&a, &b);
    a.check_shapes(cfg).unwrap();
    for l in &a.layers {
        prop_assert!(l.mean.iter().all(|v| v.is_finite()));
        prop_assert!(is_symmetric(&l.cov));
    }
    prop_assert!(a.total_variance() <= w.total_variance() * (1.0 + 1e-9));
    Ok(())
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Outcome) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

/// Every property with `cases` cases each, by name.
pub fn run_all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("relu validity", run(cases, sized_gaussian(8), |u| relu_is_valid(&u))),
        ("softmax normalization and argmax", run(cases, blocked_gaussian(), |(b, u)| softmax_is_normalized(b, &u))),
        ("linear validity", run(cases, linear_case(), |(s, w, z)| linear_is_valid(s, &w, &z))),
        (
            "trace shapes",
            run(cases, (head(3, 4, 0.1), 1usize..=4, vec_of(12, 2.0)), |((c, w), t, h)| trace_shapes(&c, &w, t, &h)),
        ),
        ("init argmax preservation", run(cases, (vec_of(30, 2.0), vec_of(4, 2.0)), |(w, h)| init_keeps_argmax(&w, &h))),
        (
            "zero-innovation fixed point",
            run(cases, (head(2, 3, 0.05), 1usize..=2, vec_of(4, 1.5)), |((c, w), t, h)| {
                zero_innovation_is_fixed(&c, &w, t, &h)
            }),
        ),
        (
            "update determinism and validity",
            run(cases, (head(2, 3, 0.05), vec_of(2, 1.5), 0usize..3, 0.01..10.0f64), |((c, w), h, t, s)| {
                update_is_deterministic(&c, &w, &h, t, s)
            }),
        ),
    ]
}

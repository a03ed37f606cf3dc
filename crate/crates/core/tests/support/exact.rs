//! Exact checks: conjugate linear-Gaussian posterior and the identity of the
//! initialized head.

#![allow(dead_code)]

use kbt_core::bayes_head::{init_head, predict, HeadConfig, OutputActivation, WeightState};
use kbt_core::moments::{softmax_blocks, GaussianState};
use kbt_core::smoother::{sequential_update, MeasurementModel, MeasurementUpdate};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One observation of a linear-Gaussian head.
#[derive(Debug, Clone)]
pub struct Observation {
    /// Token rows.
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub config: HeadConfig,
    pub prior: GaussianState,
    pub data: Vec<Observation>,
}

/// Single linear layer with identity output, deterministic inputs and a
/// dense SPD prior over the weights.
pub fn linear_problem(seed: u64, samples: usize) -> LinearProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=4);
    let d_o = rng.gen_range(1..=3);
    let config =
        HeadConfig { d, d_o, widths: vec![d_o], weight_eps: 0.0, input_eps: 0.0, output: OutputActivation::Identity };
    let p = d_o * (d + 1);
    let a = DMatrix::from_fn(p, p, |_, _| normal(&mut rng));
    let cov = &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.1;
    let prior = GaussianState::new(DVector::from_fn(p, |_, _| normal(&mut rng)), cov).unwrap();
    let data = (0..samples)
        .map(|_| {
            let tokens = rng.gen_range(1..=2);
            let n = tokens * d_o;
            let h = DMatrix::from_fn(tokens, d, |_, _| normal(&mut rng));
            let y = DVector::from_fn(n, |_, _| normal(&mut rng));
            let b = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
            let noise = &b * b.transpose() * 0.2 + DMatrix::identity(n, n) * rng.gen_range(0.05..1.0);
            Observation { h, y, noise }
        })
        .collect();
    LinearProblem { config, prior, data }
}

/// Design matrix mapping the neuron-major weight vector to the token-major
/// outputs.
pub fn design(h: &DMatrix<f64>, d_o: usize) -> DMatrix<f64> {
    let (tokens, d) = h.shape();
    let mut x = DMatrix::zeros(tokens * d_o, d_o * (d + 1));
    for t in 0..tokens {
        for j in 0..d_o {
            for c in 0..d {
                x[(t * d_o + j, j * (d + 1) + c)] = h[(t, c)];
            }
            x[(t * d_o + j, j * (d + 1) + d)] = 1.0;
        }
    }
    x
}

/// Batch posterior in information form.
pub fn conjugate_posterior(p: &LinearProblem) -> GaussianState {
    let prec0 = p.prior.cov.clone().try_inverse().unwrap();
    let mut prec = prec0.clone();
    let mut info = &prec0 * &p.prior.mean;
    for o in &p.data {
        let x = design(&o.h, p.config.d_o);
        let r_inv = o.noise.clone().try_inverse().unwrap();
        prec += x.transpose() * &r_inv * &x;
        info += x.transpose() * &r_inv * &o.y;
    }
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * info;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianState { mean, cov }
}

pub fn sequential_posterior(p: &LinearProblem, order: &[usize]) -> GaussianState {
    let mut w = WeightState { layers: vec![p.prior.clone()] };
    for &k in order {
        let o = &p.data[k];
        let m = MeasurementModel::new(o.y.clone(), o.noise.clone()).unwrap();
        w = sequential_update(&w, &o.h, &m, &p.config, MeasurementUpdate::Fuse).unwrap();
    }
    w.layers.pop().unwrap()
}

/// `max|a − b| / max|b|` over means and covariances separately; the larger.
pub fn relative_error(a: &GaussianState, b: &GaussianState) -> f64 {
    let rel = |x: f64, scale: f64| x / scale.max(f64::MIN_POSITIVE);
    let m = rel((&a.mean - &b.mean).amax(), b.mean.amax());
    let c = rel((&a.cov - &b.cov).amax(), b.cov.amax());
    m.max(c)
}

#[derive(Debug, Clone, Copy)]
pub struct ConjugateReport {
    pub problems: usize,
    /// Largest relative error against the batch posterior.
    pub worst_exact: f64,
    /// Largest relative difference between the natural and a shuffled order.
    pub worst_order: f64,
}

pub fn conjugate_check(problems: usize, max_samples: usize, seed: u64) -> ConjugateReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_exact, mut worst_order) = (0.0f64, 0.0f64);
    for i in 0..problems {
        let k = rng.gen_range(1..=max_samples);
        let p = linear_problem(seed.wrapping_mul(1000) + i as u64, k);
        let natural: Vec<usize> = (0..k).collect();
        let mut shuffled = natural.clone();
        shuffled.shuffle(&mut rng);
        let exact = conjugate_posterior(&p);
        let a = sequential_posterior(&p, &natural);
        let b = sequential_posterior(&p, &shuffled);
        worst_exact = worst_exact.max(relative_error(&a, &exact));
        worst_order = worst_order.max(relative_error(&b, &a));
    }
    ConjugateReport { problems, worst_exact, worst_order }
}

/// Largest deviation between the initialized head at `eps` and the linear
/// head `softmax(W_Oᵀ [h; 1])` over `inputs` random inputs and weights.
pub fn init_identity_deviation(inputs: usize, eps: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let d = rng.gen_range(1..=6);
        let d_o = rng.gen_range(2..=6);
        let w_o = DMatrix::from_fn(d + 1, d_o, |_, _| normal(&mut rng));
        let cfg = HeadConfig::new(d, d_o, eps);
        let w = init_head(&cfg, &w_o).unwrap();
        let h = DVector::from_fn(d, |_, _| 2.0 * normal(&mut rng));
        let (p, _) = predict(&w, &DMatrix::from_row_slice(1, d, h.as_slice()), &cfg).unwrap();
        let direct = softmax_blocks(&(w_o.transpose() * h.push(1.0)), d_o);
        worst = worst.max((p - direct).amax());
    }
    worst
}

//! Monte-Carlo oracles for the moment kernels.
//!
//! Every instance draws fresh Gaussian inputs, pushes them through the exact
//! nonlinearity and compares sample moments against the closed forms. A
//! check fails when `|analytic − mc| > 4·stderr + allowance`.

#![allow(dead_code)]

use kbt_core::moments::{
    linear_forward_with_cross, relu_cov_entry, relu_cov_truncation_bound, relu_cross_cov_diag, relu_mean, relu_var,
    softmax_blocks, softmax_moments, GaussianState, LinearShape,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const Z_LIMIT: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub kernel: &'static str,
    pub instances: usize,
    pub checks: usize,
    pub failures: usize,
    /// Largest `(|analytic − mc| − allowance) / stderr` seen.
    pub worst_z: f64,
}

impl KernelReport {
    fn new(kernel: &'static str) -> Self {
        Self { kernel, instances: 0, checks: 0, failures: 0, worst_z: 0.0 }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checks > 0
    }

    fn check(&mut self, analytic: f64, mc: f64, se: f64, allowance: f64) {
        let excess = (analytic - mc).abs() - allowance;
        self.checks += 1;
        // absolute slack for rounding in the accumulators
        if excess > Z_LIMIT * se + 1e-10 {
            self.failures += 1;
        }
        if se > 0.0 {
            self.worst_z = self.worst_z.max(excess / se);
        }
    }
}

/// Row-major sample matrix: draw `s`, coordinate `i` at `s * dim + i`.
struct Draws {
    dim: usize,
    data: Vec<f64>,
    means: Vec<f64>,
}

impl Draws {
    fn new(dim: usize, data: Vec<f64>) -> Self {
        let n = data.len() / dim;
        let mut means = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        Self { dim, data, means }
    }

    fn n(&self) -> f64 {
        (self.data.len() / self.dim) as f64
    }

    fn mean_se(&self, i: usize) -> (f64, f64) {
        let m = self.means[i];
        let ss: f64 = self.data.chunks_exact(self.dim).map(|r| (r[i] - m).powi(2)).sum();
        let var = ss / (self.n() - 1.0);
        (m, (var / self.n()).sqrt())
    }

    fn cov_se(&self, i: usize, j: usize) -> (f64, f64) {
        let (mi, mj) = (self.means[i], self.means[j]);
        let (mut s1, mut s2) = (0.0, 0.0);
        for r in self.data.chunks_exact(self.dim) {
            let d = (r[i] - mi) * (r[j] - mj);
            s1 += d;
            s2 += d * d;
        }
        let n = self.n();
        let c = s1 / (n - 1.0);
        let var_d = (s2 / n - (s1 / n).powi(2)).max(0.0);
        (c, (var_d / n).sqrt())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_cov(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| gauss(rng));
    let c = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05;
    c * scale
}

/// Draws from `N(mean, cov)`, appended to `out`.
fn sample_mvn(rng: &mut ChaCha8Rng, mean: &DVector<f64>, chol: &DMatrix<f64>, out: &mut [f64]) {
    let n = mean.len();
    let e: Vec<f64> = (0..n).map(|_| gauss(rng)).collect();
    for i in 0..n {
        let mut v = mean[i];
        for k in 0..=i {
            v += chol[(i, k)] * e[k];
        }
        out[i] = v;
    }
}

fn cholesky(c: &DMatrix<f64>) -> DMatrix<f64> {
    c.clone().cholesky().expect("random covariance is SPD").l()
}

/// Standardized means stay within ±3 so the positive part is never a rare
/// event; otherwise the sampled stderr itself is unreliable.
fn relu_inputs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let var: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01f64.ln()..4f64.ln()).exp()).collect();
    let mu = var.iter().map(|v| rng.gen_range(-3.0..3.0) * v.sqrt()).collect();
    (mu, var)
}

pub fn relu_mean_oracle(samples: usize, instances: usize, seed: u64) -> KernelReport {
    let mut rep = KernelReport::new("relu_mean");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.gen_range(1..=8);
        let (mu, var) = relu_inputs(&mut rng, n);
        let mut data = vec![0.0; samples * n];
        for row in data.chunks_exact_mut(n) {
            for i in 0..n {
                row[i] = (mu[i] + var[i].sqrt() * gauss(&mut rng)).max(0.0);
            }
        }
        let d = Draws::new(n, data);
        for i in 0..n {
            let (m, se) = d.mean_se(i);
            rep.check(relu_mean(mu[i], var[i]).unwrap(), m, se, 0.0);
        }
        rep.instances += 1;
    }
    rep
}

pub fn relu_cross_cov_oracle(samples: usize, instances: usize, seed: u64) -> KernelReport {
    let mut rep = KernelReport::new("relu_cross_cov_diag");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.gen_range(1..=8);
        let (mu, var) = relu_inputs(&mut rng, n);
        // [u_0, relu(u_0), u_1, relu(u_1), ...]
        let mut data = vec![0.0; samples * 2 * n];
        for row in data.chunks_exact_mut(2 * n) {
            for i in 0..n {
                let u = mu[i] + var[i].sqrt() * gauss(&mut rng);
                row[2 * i] = u;
                row[2 * i + 1] = u.max(0.0);
            }
        }
        let d = Draws::new(2 * n, data);
        for i in 0..n {
            let (c, se) = d.cov_se(2 * i, 2 * i + 1);
            let mu_z = relu_mean(mu[i], var[i]).unwrap();
            rep.check(relu_cross_cov_diag(mu[i], var[i], mu_z).unwrap(), c, se, 0.0);
        }
        rep.instances += 1;
    }
    rep
}

pub fn relu_cov_entry_oracle(samples: usize, instances: usize, seed: u64) -> KernelReport {
    let mut rep = KernelReport::new("relu_cov_entry");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let n = rng.gen_range(2..=8);
        let scale = rng.gen_range(0.1..2.0);
        let cov = random_cov(&mut rng, n, scale);
        let mean = DVector::from_fn(n, |i, _| rng.gen_range(-3.0..3.0) * cov[(i, i)].sqrt());
        let l = cholesky(&cov);
        let mut data = vec![0.0; samples * n];
        for row in data.chunks_exact_mut(n) {
            sample_mvn(&mut rng, &mean, &l, row);
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let d = Draws::new(n, data);
        for j in 0..n {
            for k in (j + 1)..n {
                let args = (mean[j], mean[k], cov[(j, j)], cov[(k, k)], cov[(j, k)]);
                let a = relu_cov_entry(args.0, args.1, args.2, args.3, args.4).unwrap();
                let bound = relu_cov_truncation_bound(args.0, args.1, args.2, args.3, args.4).unwrap();
                let (c, se) = d.cov_se(j, k);
                // when joint exceedances are rare the sample stderr collapses
                // with them; the stderr at zero correlation is a floor
                let v = |i: usize| relu_var(mean[i], cov[(i, i)]).unwrap();
                let floor = (v(j) * v(k) / samples as f64).sqrt();
                rep.check(a, c, se.max(floor), bound);
            }
        }
        rep.instances += 1;
    }
    rep
}

pub fn linear_forward_oracle(samples: usize, instances: usize, seed: u64) -> KernelReport {
    let mut rep = KernelReport::new("linear_forward_moments");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let shape =
            LinearShape { tokens: rng.gen_range(1..=2), n_in: rng.gen_range(1..=3), n_out: rng.gen_range(1..=2) };
        let (p, nz) = (shape.n_weights(), shape.tokens * shape.n_in);
        let w = GaussianState::new(DVector::from_fn(p, |_, _| gauss(&mut rng)), random_cov(&mut rng, p, 0.5)).unwrap();
        let z =
            GaussianState::new(DVector::from_fn(nz, |_, _| gauss(&mut rng)), random_cov(&mut rng, nz, 0.5)).unwrap();
        let (u, wu) = linear_forward_with_cross(&w, &z, shape).unwrap();
        let (lw, lz) = (cholesky(&w.cov), cholesky(&z.cov));
        let nu = u.dim();
        let q = shape.block();
        // [u, w]
        let dim = nu + p;
        let mut data = vec![0.0; samples * dim];
        let (mut wv, mut zv) = (vec![0.0; p], vec![0.0; nz]);
        for row in data.chunks_exact_mut(dim) {
            sample_mvn(&mut rng, &w.mean, &lw, &mut wv);
            sample_mvn(&mut rng, &z.mean, &lz, &mut zv);
            for t in 0..shape.tokens {
                for j in 0..shape.n_out {
                    let mut v = wv[j * q + shape.n_in];
                    for a in 0..shape.n_in {
                        v += wv[j * q + a] * zv[t * shape.n_in + a];
                    }
                    row[t * shape.n_out + j] = v;
                }
            }
            row[nu..].copy_from_slice(&wv);
        }
        let d = Draws::new(dim, data);
        for i in 0..nu {
            let (m, se) = d.mean_se(i);
            rep.check(u.mean[i], m, se, 0.0);
            for j in i..nu {
                let (c, se) = d.cov_se(i, j);
                rep.check(u.cov[(i, j)], c, se, 0.0);
            }
        }
        for a in 0..p {
            for i in 0..nu {
                let (c, se) = d.cov_se(nu + a, i);
                rep.check(wu.matrix[(a, i)], c, se, 0.0);
            }
        }
        rep.instances += 1;
    }
    rep
}

/// Softmax instances with `trace(Σ_u) ≤ max_trace`; mean, covariance and
/// input cross-covariance are all checked.
pub fn softmax_oracle(samples: usize, instances: usize, seed: u64, max_trace: f64) -> KernelReport {
    let mut rep = KernelReport::new("softmax_moments");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..instances {
        let block = rng.gen_range(2..=4);
        let n = block * rng.gen_range(1..=2);
        let mean = DVector::from_fn(n, |_, _| 1.5 * gauss(&mut rng));
        let raw = random_cov(&mut rng, n, 1.0);
        let cov = &raw * (rng.gen_range(0.1 * max_trace..max_trace) / raw.trace());
        let u = GaussianState::new(mean.clone(), cov.clone()).unwrap();
        let sm = softmax_moments(&u, block).unwrap();
        let l = cholesky(&cov);
        // [p, u]
        let dim = 2 * n;
        let mut data = vec![0.0; samples * dim];
        let mut x = DVector::zeros(n);
        for row in data.chunks_exact_mut(dim) {
            sample_mvn(&mut rng, &mean, &l, x.as_mut_slice());
            row[..n].copy_from_slice(softmax_blocks(&x, block).as_slice());
            row[n..].copy_from_slice(x.as_slice());
        }
        let d = Draws::new(dim, data);
        for i in 0..n {
            let (m, se) = d.mean_se(i);
            rep.check(sm.p.mean[i], m, se, 0.0);
            for j in i..n {
                let (c, se) = d.cov_se(i, j);
                rep.check(sm.p.cov[(i, j)], c, se, 0.0);
            }
            for a in 0..n {
                let (c, se) = d.cov_se(n + a, i);
                rep.check(sm.up_cross.matrix[(a, i)], c, se, 0.0);
            }
        }
        rep.instances += 1;
    }
    rep
}

/// All kernel oracles with the same sample and instance counts.
pub fn run_all(samples: usize, instances: usize, seed: u64) -> Vec<KernelReport> {
    vec![
        relu_mean_oracle(samples, instances, seed),
        relu_cross_cov_oracle(samples, instances, seed + 1),
        relu_cov_entry_oracle(samples, instances, seed + 2),
        linear_forward_oracle(samples, instances, seed + 3),
        softmax_oracle(samples, instances, seed + 4, 0.05),
    ]
}

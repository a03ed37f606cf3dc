//! Closed-form Gaussian moment propagation through linear maps with random
//! weights, the ReLU and a blockwise softmax.
//!
//! Vectors that stack several tokens are token-major: entry `t * n + j` is
//! neuron `j` of token `t`. Weight vectors are neuron-major with the bias
//! entry last in each neuron's block, so neuron `j` owns entries
//! `j * (n_in + 1) .. (j + 1) * (n_in + 1)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;

/// Variances below this value are clamped before any division by σ.
pub const VAR_FLOOR: f64 = 1e-18;

/// Mean and covariance of a random vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::domain(format!(
                "mean has length {n} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite moment"));
        }
        Ok(Self { mean, cov })
    }

    /// A point mass at `mean`.
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self { mean, cov: DMatrix::zeros(n, n) }
    }

    /// `mean` with isotropic covariance `var · I`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Self {
        let n = mean.len();
        Self { mean, cov: DMatrix::identity(n, n) * var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Symmetry and PSD (up to `-1e-8 · trace / n`) checks.
    pub fn validate(&self) -> Result<()> {
        if self.cov.nrows() != self.dim() || self.cov.ncols() != self.dim() {
            return Err(Error::domain("dimension mismatch between mean and covariance"));
        }
        if !linalg::is_symmetric(&self.cov) {
            return Err(Error::domain("covariance is not symmetric"));
        }
        if !linalg::is_psd(&self.cov) {
            return Err(Error::domain(format!(
                "covariance is not PSD (min eigenvalue {:.3e})",
                linalg::min_eigenvalue(&self.cov)
            )));
        }
        Ok(())
    }
}

/// Cross-covariance `Σ_{a,b}` between a vector `a` of dimension `nrows` and a
/// vector `b` of dimension `ncols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCov {
    pub matrix: DMatrix<f64>,
}

impl CrossCov {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn check_dims(&self, a: usize, b: usize) -> Result<()> {
        if self.matrix.nrows() != a || self.matrix.ncols() != b {
            return Err(Error::domain(format!(
                "cross-covariance is {}x{}, expected {a}x{b}",
                self.matrix.nrows(),
                self.matrix.ncols()
            )));
        }
        Ok(())
    }
}

fn check_var(var: f64, what: &str) -> Result<()> {
    if var.is_nan() || var < 0.0 {
        return Err(Error::domain(format!("{what}: variance {var} is negative")));
    }
    Ok(())
}

fn check_positive_var(var: f64, what: &str) -> Result<()> {
    if var.is_nan() || var <= 0.0 {
        return Err(Error::domain(format!("{what}: variance {var} is not positive")));
    }
    Ok(())
}

/// `E[max(0, u)]` for `u ~ N(mu, var)`.
pub fn relu_mean(mu: f64, var: f64) -> Result<f64> {
    check_var(var, "relu_mean")?;
    Ok(relu_mean_unchecked(mu, var))
}

fn relu_mean_unchecked(mu: f64, var: f64) -> f64 {
    if var < VAR_FLOOR {
        return mu.max(0.0);
    }
    let s = var.sqrt();
    let t = mu / s;
    mu * normal::cdf(t) + s * normal::pdf(t)
}

/// Exact `Var(max(0, u))` for `u ~ N(mu, var)`.
pub fn relu_var(mu: f64, var: f64) -> Result<f64> {
    check_var(var, "relu_var")?;
    Ok(relu_var_unchecked(mu, var))
}

fn relu_var_unchecked(mu: f64, var: f64) -> f64 {
    if var < VAR_FLOOR {
        return 0.0;
    }
    let s = var.sqrt();
    let t = mu / s;
    // Var / σ² as a function of the standardized mean; evaluated on the
    // negative side where no cancellation occurs, using
    // max(0,u) = u + max(0,-u) for t > 0.
    let g = |t: f64| {
        let cdf = normal::cdf(t);
        let pdf = normal::pdf(t);
        let m = t * cdf + pdf;
        ((t * t + 1.0) * cdf + t * pdf - m * m).max(0.0)
    };
    let r = if t > 0.0 { 1.0 + g(-t) - 2.0 * normal::cdf(-t) } else { g(t) };
    var * r.max(0.0)
}

/// Second-order expansion of `Cov(max(0,u_j), max(0,u_k))` for jointly
/// Gaussian `u_j, u_k`:
/// `Φ_j Φ_k Σ_jk + φ_j φ_k Σ_jk² / (2 σ_j σ_k)`.
pub fn relu_cov_entry(mu_j: f64, mu_k: f64, var_j: f64, var_k: f64, cov_jk: f64) -> Result<f64> {
    check_positive_var(var_j, "relu_cov_entry")?;
    check_positive_var(var_k, "relu_cov_entry")?;
    let bound = (var_j * var_k).sqrt();
    if !cov_jk.is_finite() || cov_jk.abs() > bound * (1.0 + 1e-9) + VAR_FLOOR {
        return Err(Error::domain(format!("relu_cov_entry: |cov| {cov_jk} exceeds sqrt(var_j var_k) {bound}")));
    }
    let (sj, sk) = (var_j.max(VAR_FLOOR).sqrt(), var_k.max(VAR_FLOOR).sqrt());
    let (tj, tk) = (mu_j / sj, mu_k / sk);
    Ok(relu_cov_expansion(normal::cdf(tj), normal::cdf(tk), normal::pdf(tj) / sj, normal::pdf(tk) / sk, cov_jk))
}

#[inline]
fn relu_cov_expansion(cdf_j: f64, cdf_k: f64, pdf_over_s_j: f64, pdf_over_s_k: f64, c: f64) -> f64 {
    cdf_j * cdf_k * c + 0.5 * pdf_over_s_j * pdf_over_s_k * c * c
}

/// Upper bound on `|exact covariance − relu_cov_entry|`.
///
/// In the Hermite expansion of the covariance in powers of the correlation
/// `ρ`, `relu_cov_entry` keeps the first two terms. By Cauchy–Schwarz the
/// rest is bounded by `|ρ|³ · sqrt(R_j R_k)`, where `R` is the part of the
/// exact ReLU variance not captured by the first two terms of the diagonal.
pub fn relu_cov_truncation_bound(mu_j: f64, mu_k: f64, var_j: f64, var_k: f64, cov_jk: f64) -> Result<f64> {
    check_positive_var(var_j, "relu_cov_truncation_bound")?;
    check_positive_var(var_k, "relu_cov_truncation_bound")?;
    let rest = |mu: f64, var: f64| {
        let s = var.sqrt();
        let t = mu / s;
        let (c, p) = (normal::cdf(t), normal::pdf(t));
        (relu_var_unchecked(mu, var) - var * c * c - 0.5 * var * p * p).max(0.0)
    };
    let rho = (cov_jk / (var_j * var_k).sqrt()).clamp(-1.0, 1.0);
    Ok(rho.abs().powi(3) * (rest(mu_j, var_j) * rest(mu_k, var_k)).sqrt())
}

/// `Cov(u, max(0, u))` for `u ~ N(mu, var)` given `mu_z = relu_mean(mu, var)`:
/// `(μ² + σ²) Φ(μ/σ) + μ σ² N(0; μ, σ²) − μ μ_z`.
pub fn relu_cross_cov_diag(mu: f64, var: f64, mu_z: f64) -> Result<f64> {
    check_positive_var(var, "relu_cross_cov_diag")?;
    let var = var.max(VAR_FLOOR);
    let s = var.sqrt();
    let t = mu / s;
    Ok((mu * mu + var) * normal::cdf(t) + mu * var * normal::density(0.0, mu, var) - mu * mu_z)
}

/// Moments of `z = max(0, u)` elementwise, together with the diagonal of
/// `Σ_{u,z}`.
///
/// The diagonal of the output covariance is the exact ReLU variance; the
/// off-diagonal entries use [`relu_cov_entry`]'s expansion. The cross-covariance
/// diagonal is evaluated as `σ² Φ(μ/σ)`, which equals
/// [`relu_cross_cov_diag`] in exact arithmetic and avoids its cancellation.
pub fn relu_moments(u: &GaussianState) -> Result<(GaussianState, DVector<f64>)> {
    let n = u.dim();
    let mut mean = DVector::zeros(n);
    let mut cross = DVector::zeros(n);
    let mut cdf = vec![0.0; n];
    let mut pdf_over_s = vec![0.0; n];
    let mut var_exact = vec![0.0; n];
    for i in 0..n {
        let mu = u.mean[i];
        let raw = u.cov[(i, i)];
        let var = raw.max(0.0);
        mean[i] = relu_mean_unchecked(mu, var);
        var_exact[i] = relu_var_unchecked(mu, var);
        let vf = var.max(VAR_FLOOR);
        let s = vf.sqrt();
        let t = mu / s;
        cdf[i] = normal::cdf(t);
        pdf_over_s[i] = normal::pdf(t) / s;
        cross[i] = if var < VAR_FLOOR { 0.0 } else { var * cdf[i] };
    }
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..n {
        for j in 0..k {
            let v = relu_cov_expansion(cdf[j], cdf[k], pdf_over_s[j], pdf_over_s[k], u.cov[(j, k)]);
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
        cov[(k, k)] = var_exact[k];
    }
    linalg::ensure_psd(&mut cov, "relu covariance")?;
    Ok((GaussianState { mean, cov }, cross))
}

/// Blockwise softmax of `v` (each consecutive block of `block` entries).
pub fn softmax_blocks(v: &DVector<f64>, block: usize) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for b in 0..v.len() / block {
        let seg = v.rows(b * block, block);
        let m = seg.max();
        let mut sum = 0.0;
        for i in 0..block {
            let e = (seg[i] - m).exp();
            out[b * block + i] = e;
            sum += e;
        }
        for i in 0..block {
            out[b * block + i] /= sum;
        }
    }
    out
}

/// Output of [`softmax_moments`].
#[derive(Debug, Clone)]
pub struct SoftmaxMoments {
    pub p: GaussianState,
    /// `Σ_{u,p}`.
    pub up_cross: CrossCov,
}

/// First-order Taylor moments of a blockwise softmax `p = softmax(u)`.
///
/// With `J` the block-diagonal Jacobian `diag(p) − p pᵀ` at the mean:
/// `μ_p = softmax(μ_u)`, `Σ_p = J Σ_u Jᵀ`, `Σ_{u,p} = Σ_u Jᵀ`.
pub fn softmax_moments(u: &GaussianState, block_size: usize) -> Result<SoftmaxMoments> {
    let n = u.dim();
    if block_size == 0 || n % block_size != 0 {
        return Err(Error::domain(format!("softmax: dimension {n} is not a multiple of block size {block_size}")));
    }
    let p = softmax_blocks(&u.mean, block_size);
    let mut jac = DMatrix::zeros(n, n);
    for b in 0..n / block_size {
        let o = b * block_size;
        for i in 0..block_size {
            for k in 0..block_size {
                let d = if i == k { p[o + i] } else { 0.0 };
                jac[(o + i, o + k)] = d - p[o + i] * p[o + k];
            }
        }
    }
    // J is symmetric.
    let up = &u.cov * &jac;
    let mut p_cov = &jac * &up;
    linalg::ensure_psd(&mut p_cov, "softmax covariance")?;
    Ok(SoftmaxMoments { p: GaussianState { mean: p, cov: p_cov }, up_cross: CrossCov::new(up) })
}

/// Geometry of a fully connected layer applied to each of `tokens` inputs
/// with shared weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearShape {
    pub tokens: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl LinearShape {
    /// Length of one neuron's weight block (inputs plus bias).
    pub fn block(&self) -> usize {
        self.n_in + 1
    }

    pub fn n_weights(&self) -> usize {
        self.n_out * self.block()
    }

    fn check(&self, w: &GaussianState, z_dim: usize) -> Result<()> {
        if w.dim() != self.n_weights() {
            return Err(Error::domain(format!("weight vector has length {}, expected {}", w.dim(), self.n_weights())));
        }
        if z_dim != self.tokens * self.n_in {
            return Err(Error::domain(format!(
                "layer input has dimension {z_dim}, expected {} tokens x {}",
                self.tokens, self.n_in
            )));
        }
        Ok(())
    }
}

/// Mean weight matrix (`n_out × (n_in + 1)`, bias in the last column).
pub fn mean_matrix(w_mean: &DVector<f64>, shape: LinearShape) -> DMatrix<f64> {
    let q = shape.block();
    DMatrix::from_fn(shape.n_out, q, |j, a| w_mean[j * q + a])
}

fn augmented_means(z_mean: &DVector<f64>, shape: LinearShape) -> Vec<DVector<f64>> {
    (0..shape.tokens)
        .map(|t| {
            let mut m = DVector::from_element(shape.block(), 1.0);
            m.rows_mut(0, shape.n_in).copy_from(&z_mean.rows(t * shape.n_in, shape.n_in));
            m
        })
        .collect()
}

/// `Σ_{w,u}`: column `s * n_out + k` is `Σ_w[:, block k] · [μ_{z_s}; 1]`.
pub fn linear_cross_cov_wu(w: &GaussianState, z_mean: &DVector<f64>, shape: LinearShape) -> Result<CrossCov> {
    shape.check(w, z_mean.len())?;
    let q = shape.block();
    let p = shape.n_weights();
    let mut out = DMatrix::zeros(p, shape.tokens * shape.n_out);
    for (s, m) in augmented_means(z_mean, shape).iter().enumerate() {
        for k in 0..shape.n_out {
            let mut col = out.column_mut(s * shape.n_out + k);
            col.gemv(1.0, &w.cov.columns(k * q, q), m, 0.0);
        }
    }
    Ok(CrossCov::new(out))
}

/// `Σ_{z,u}`: block `(t, s)` is `Σ_{z_t,z_s} · M̄ᵀ` with `M̄` the mean weight
/// matrix without its bias column.
pub fn linear_cross_cov_zu(z: &GaussianState, w_mean: &DVector<f64>, shape: LinearShape) -> Result<CrossCov> {
    if w_mean.len() != shape.n_weights() || z.dim() != shape.tokens * shape.n_in {
        return Err(Error::domain("linear_cross_cov_zu: dimension mismatch"));
    }
    let mx = mean_matrix(w_mean, shape).columns(0, shape.n_in).into_owned();
    let (ni, no) = (shape.n_in, shape.n_out);
    let mut out = DMatrix::zeros(shape.tokens * ni, shape.tokens * no);
    for t in 0..shape.tokens {
        for s in 0..shape.tokens {
            let a = z.cov.view((t * ni, s * ni), (ni, ni));
            out.view_mut((t * ni, s * no), (ni, no)).gemm(1.0, &a, &mx.transpose(), 0.0);
        }
    }
    Ok(CrossCov::new(out))
}

/// Moments of `u_t = W̃ [z_t; 1]` for every token `t`, where the weights are
/// independent of the input.
pub fn linear_forward_moments(w: &GaussianState, z: &GaussianState, shape: LinearShape) -> Result<GaussianState> {
    linear_forward_with_cross(w, z, shape).map(|(u, _)| u)
}

/// [`linear_forward_moments`] that also returns `Σ_{w,u}`, which the forward
/// pass computes anyway.
pub fn linear_forward_with_cross(
    w: &GaussianState,
    z: &GaussianState,
    shape: LinearShape,
) -> Result<(GaussianState, CrossCov)> {
    shape.check(w, z.dim())?;
    let (ni, no, q) = (shape.n_in, shape.n_out, shape.block());
    let y = shape.tokens;
    let mbar = mean_matrix(&w.mean, shape);
    let mx = mbar.columns(0, ni).into_owned();
    let aug = augmented_means(&z.mean, shape);
    let wu = linear_cross_cov_wu(w, &z.mean, shape)?;

    let mut mean = DVector::zeros(y * no);
    for t in 0..y {
        mean.rows_mut(t * no, no).copy_from(&(&mbar * &aug[t]));
    }

    let mut cov = DMatrix::zeros(y * no, y * no);
    for t in 0..y {
        for s in t..y {
            let mut block = DMatrix::zeros(no, no);
            // m̃_tᵀ Σ_{w_j,w_k} m̃_s, read off Σ_{w,u}
            for k in 0..no {
                let col = wu.matrix.column(s * no + k);
                for j in 0..no {
                    block[(j, k)] = col.rows(j * q, q).dot(&aug[t]);
                }
            }
            let a = z.cov.view((t * ni, s * ni), (ni, ni));
            if a.iter().any(|v| *v != 0.0) {
                // M̄ A M̄ᵀ
                block += &mx * a * mx.transpose();
                // Σ_ab A[a,b] Σ_{w_j,w_k}[a,b]
                let diagonal = (0..ni).all(|c| (0..ni).all(|r| r == c || a[(r, c)] == 0.0));
                for j in 0..no {
                    for k in 0..no {
                        let bjk = w.cov.view((j * q, k * q), (ni, ni));
                        block[(j, k)] += if diagonal {
                            (0..ni).map(|c| a[(c, c)] * bjk[(c, c)]).sum::<f64>()
                        } else {
                            (0..ni).map(|c| a.column(c).dot(&bjk.column(c))).sum::<f64>()
                        };
                    }
                }
            }
            cov.view_mut((t * no, s * no), (no, no)).copy_from(&block);
            if s != t {
                cov.view_mut((s * no, t * no), (no, no)).copy_from(&block.transpose());
            }
        }
    }
    linalg::ensure_psd(&mut cov, "linear layer covariance")?;
    Ok((GaussianState { mean, cov }, wu))
}

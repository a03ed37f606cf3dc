//! Symmetric-matrix utilities: symmetrization, PSD checks and repair, and a
//! regularized SPD right-solve.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues above `-PSD_TOL * trace / n` count as nonnegative.
pub const PSD_TOL: f64 = 1e-8;
/// Eigenvalues below `-PSD_HARD_FLOOR * trace` are not repaired.
pub const PSD_HARD_FLOOR: f64 = 1e-4;
/// Condition number above which a solve adds diagonal jitter.
pub const COND_LIMIT: f64 = 1e12;
/// Jitter schedule for regularized solves, relative to `trace / n`.
pub const JITTER_STEPS: [f64; 2] = [1e-9, 1e-6];

/// Replace `a` with `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    // tiled so both triangles are walked with reasonable locality
    const TILE: usize = 32;
    for jb in (0..n).step_by(TILE) {
        for ib in (jb..n).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                for i in ib.max(j + 1)..(ib + TILE).min(n) {
                    let v = 0.5 * (a[(i, j)] + a[(j, i)]);
                    a[(i, j)] = v;
                    a[(j, i)] = v;
                }
            }
        }
    }
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `max|a - aᵀ| <= 1e-10 * max|a|`.
pub fn is_symmetric(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

fn psd_tolerance(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1) as f64;
    PSD_TOL * a.trace().abs() / n
}

/// True when the smallest eigenvalue is at least `-1e-8 * trace / n`.
///
/// Tries a Cholesky factorization of `a + tol·I` first and only falls back to
/// an eigendecomposition when that fails.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let tol = psd_tolerance(a);
    if a.iter().all(|v| *v == 0.0) {
        return true;
    }
    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += tol.max(f64::MIN_POSITIVE);
    }
    if Cholesky::new(shifted).is_some() {
        return true;
    }
    min_eigenvalue(a) >= -tol
}

/// Symmetrize `a` and, if it violates the PSD tolerance, clip its negative
/// eigenvalues to zero. Returns whether a clip was needed.
///
/// Fails with a numerical breakdown when an eigenvalue lies below the hard
/// floor `-1e-4 * trace`.
pub fn ensure_psd(a: &mut DMatrix<f64>, what: &str) -> Result<bool> {
    if !a.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::breakdown(None, format!("{what}: non-finite covariance entry")));
    }
    symmetrize(a);
    if is_psd(a) {
        return Ok(false);
    }
    let floor = -PSD_HARD_FLOOR * a.trace().abs();
    let eig = SymmetricEigen::new(a.clone());
    let lmin = eig.eigenvalues.min();
    if lmin < floor {
        return Err(Error::breakdown(None, format!("{what}: eigenvalue {lmin:.3e} below hard floor {floor:.3e}")));
    }
    log::debug!("{what}: clipped eigenvalue {lmin:.3e}");
    *a = clip_eigen(eig);
    Ok(true)
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues, without any floor. Returns whether anything was clipped.
pub fn clip_to_psd(a: &mut DMatrix<f64>) -> bool {
    symmetrize(a);
    if is_psd(a) {
        return false;
    }
    let eig = SymmetricEigen::new(a.clone());
    *a = clip_eigen(eig);
    true
}

fn clip_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let lambda = eig.eigenvalues.map(|l| l.max(0.0));
    let mut out = v * DMatrix::from_diagonal(&lambda) * v.transpose();
    symmetrize(&mut out);
    out
}

/// O(n²) necessary conditions for positive semidefiniteness: nonnegative
/// diagonal (up to tolerance) and finite entries. Used on the large weight
/// covariances where an eigendecomposition per update is too costly.
pub fn check_psd_cheap(a: &DMatrix<f64>, what: &str) -> Result<()> {
    let n = a.nrows();
    let tol = psd_tolerance(a);
    for i in 0..n {
        let d = a[(i, i)];
        if !d.is_finite() || d < -tol {
            return Err(Error::breakdown(None, format!("{what}: diagonal entry {i} is {d:.3e}")));
        }
    }
    if !a.as_slice().iter().all(|v| v.is_finite()) {
        return Err(Error::breakdown(None, format!("{what}: non-finite covariance entry")));
    }
    Ok(())
}

/// Compute `b · s⁻¹` for a symmetric positive (semi)definite `s`.
///
/// When `s` is singular or its condition number exceeds 1e12, `1e-9·trace/n`
/// is added to the diagonal; if the factorization still fails the jitter is
/// raised to `1e-6·trace/n`, and after that the solve gives up. An exactly
/// zero `s` yields a zero result.
pub fn spd_right_solve(s: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = s.nrows();
    if s.ncols() != n || b.ncols() != n {
        return Err(Error::domain(format!(
            "spd_right_solve: s is {}x{}, b is {}x{}",
            s.nrows(),
            s.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(b.nrows(), 0));
    }
    let mut s = s.clone();
    symmetrize(&mut s);
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::breakdown(None, "non-finite matrix in solve"));
    }
    let scale = s.trace() / n as f64;
    if s.iter().all(|v| *v == 0.0) {
        // pseudo-inverse of the zero matrix
        return Ok(DMatrix::zeros(b.nrows(), n));
    }
    if !(scale > 0.0) {
        return Err(Error::breakdown(None, format!("solve: matrix trace {:.3e} is not positive", s.trace())));
    }

    let eig = s.clone().symmetric_eigenvalues();
    let (lmin, lmax) = (eig.min(), eig.max());
    let well_conditioned = lmin > 0.0 && lmax / lmin <= COND_LIMIT;

    let start = if well_conditioned { 0 } else { 1 };
    let schedule = [0.0, JITTER_STEPS[0], JITTER_STEPS[1]];
    for &rel in &schedule[start..] {
        let mut sj = s.clone();
        if rel > 0.0 {
            for i in 0..n {
                sj[(i, i)] += rel * scale;
            }
        }
        if let Some(ch) = Cholesky::new(sj) {
            if rel > JITTER_STEPS[0] {
                log::debug!("solve escalated jitter to {rel:e}");
            }
            // X s = b  <=>  s Xᵀ = bᵀ
            return Ok(ch.solve(&b.transpose()).transpose());
        }
    }
    Err(Error::breakdown(None, format!("matrix of size {n} is singular after jitter {:e}", JITTER_STEPS[1])))
}

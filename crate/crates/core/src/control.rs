//! Cart-pole dynamics, discrete LQR and i.i.d. controller samples.

use nalgebra::{DMatrix, Matrix4, Matrix5, RowVector4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    /// Cart mass (kg).
    pub m_c: f64,
    /// Pole mass (kg), concentrated at distance `l_p` from the pivot.
    pub m_p: f64,
    /// Distance from pivot to the pole's mass (m).
    pub l_p: f64,
    pub g: f64,
    /// Integration step (s).
    pub dt: f64,
}

impl PendulumParams {
    pub fn nominal() -> Self {
        Self { m_c: 1.0, m_p: 0.1, l_p: 0.5, g: 9.81, dt: 0.02 }
    }

    pub fn shifted() -> Self {
        Self { m_p: 1.0, l_p: 5.0, ..Self::nominal() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            [self.m_c, self.m_p, self.l_p, self.dt].iter().all(|v| v.is_finite() && *v > 0.0) && self.g.is_finite();
        if !ok {
            return Err(Error::Config(format!("invalid pendulum parameters {self:?}")));
        }
        Ok(())
    }
}

/// `[x_c, v_c, θ_p, ω_p]` with θ measured from upright.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PendulumState {
    pub x_c: f64,
    pub v_c: f64,
    pub theta_p: f64,
    pub omega_p: f64,
}

impl PendulumState {
    pub fn from_array(a: [f64; 4]) -> Self {
        Self { x_c: a[0], v_c: a[1], theta_p: a[2], omega_p: a[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_c, self.v_c, self.theta_p, self.omega_p]
    }

    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::from(self.to_array())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn derivative(p: &PendulumParams, s: &Vector4<f64>, u: f64) -> Vector4<f64> {
    let (v, th, om) = (s[1], s[2], s[3]);
    let (st, ct) = th.sin_cos();
    let xdd = (u + p.m_p * st * (p.l_p * om * om - p.g * ct)) / (p.m_c + p.m_p * st * st);
    let thdd = (p.g * st - xdd * ct) / p.l_p;
    Vector4::new(v, xdd, om, thdd)
}

/// Advance one step of length `dt` with classical Runge–Kutta.
pub fn step(params: &PendulumParams, state: &PendulumState, u: f64) -> Result<PendulumState> {
    if !state.is_finite() || !u.is_finite() {
        return Err(Error::domain("non-finite state or force"));
    }
    let s = state.to_vector();
    let h = params.dt;
    let k1 = derivative(params, &s, u);
    let k2 = derivative(params, &(s + k1 * (h / 2.0)), u);
    let k3 = derivative(params, &(s + k2 * (h / 2.0)), u);
    let k4 = derivative(params, &(s + k3 * h), u);
    let n = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let next = PendulumState::from_array([n[0], n[1], n[2], n[3]]);
    if !next.is_finite() {
        return Err(Error::Divergence("cart-pole state became non-finite".into()));
    }
    Ok(next)
}

/// Total mechanical energy of the unforced system.
pub fn energy(p: &PendulumParams, s: &PendulumState) -> f64 {
    let (st, ct) = s.theta_p.sin_cos();
    let pole_vx = s.v_c + p.l_p * s.omega_p * ct;
    let pole_vy = -p.l_p * s.omega_p * st;
    0.5 * p.m_c * s.v_c * s.v_c + 0.5 * p.m_p * (pole_vx * pole_vx + pole_vy * pole_vy) + p.m_p * p.g * p.l_p * ct
}

/// Continuous-time Jacobians at the upright equilibrium.
pub fn linearize_continuous(p: &PendulumParams) -> (Matrix4<f64>, Vector4<f64>) {
    let a = Matrix4::new(
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        -p.m_p * p.g / p.m_c,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        (p.m_c + p.m_p) * p.g / (p.l_p * p.m_c),
        0.0,
    );
    let b = Vector4::new(0.0, 1.0 / p.m_c, 0.0, -1.0 / (p.l_p * p.m_c));
    (a, b)
}

/// Zero-order-hold discretization of the upright linearization.
pub fn linearize(p: &PendulumParams) -> (Matrix4<f64>, Vector4<f64>) {
    let (ac, bc) = linearize_continuous(p);
    let mut m = Matrix5::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(&ac);
    m.fixed_view_mut::<4, 1>(0, 4).copy_from(&bc);
    let e = (m * p.dt).exp();
    (e.fixed_view::<4, 4>(0, 0).into_owned(), e.fixed_view::<4, 1>(0, 4).into_owned())
}

/// Discrete LQR solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrGain {
    /// Feedback `u = −K x`.
    pub k: DMatrix<f64>,
    /// Riccati solution.
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LqrGain {
    /// `−K x` for a single-input system.
    pub fn action(&self, s: &PendulumState) -> f64 {
        let k = RowVector4::from_iterator(self.k.iter().copied());
        -(k * s.to_vector())[0]
    }
}

fn riccati_rhs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let k = s.cholesky().ok_or_else(|| Error::breakdown(None, "R + BᵀPB is not positive definite"))?.solve(&(&btp * a));
    let mut next = a.transpose() * p * a - a.transpose() * p * b * k + q;
    crate::linalg::symmetrize(&mut next);
    Ok(next)
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q` and return `K = (R + BᵀPB)⁻¹ BᵀPA`.
///
/// The iteration stops once no entry of `P` moves by more than 1e-10.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrGain> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::domain("lqr_gain: inconsistent matrix shapes"));
    }
    let mut p = q.clone();
    for _ in 0..100_000 {
        let next = riccati_rhs(a, b, q, r, &p)?;
        let diff = (&next - &p).amax();
        p = next;
        if !diff.is_finite() {
            return Err(Error::Divergence("Riccati iteration diverged".into()));
        }
        if diff <= 1e-10 {
            let btp = b.transpose() * &p;
            let k = (r + &btp * b).cholesky().unwrap().solve(&(&btp * a));
            return Ok(LqrGain { k, p, q: q.clone(), r: r.clone() });
        }
    }
    Err(Error::Divergence("Riccati iteration did not converge in 100000 iterations".into()))
}

/// Residual `P − (AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q)`, max-norm.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, g: &LqrGain) -> Result<f64> {
    Ok((&g.p - riccati_rhs(a, b, &g.q, &g.r, &g.p)?).amax())
}

/// LQR gain for the discretized linearization of `params` with diagonal
/// weights.
pub fn lqr_for(params: &PendulumParams, q_diag: [f64; 4], r: f64) -> Result<LqrGain> {
    params.validate()?;
    let (a, b) = linearize(params);
    let a = DMatrix::from_iterator(4, 4, a.iter().copied());
    let b = DMatrix::from_iterator(4, 1, b.iter().copied());
    lqr_gain(
        &a,
        &b,
        &DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&q_diag)),
        &DMatrix::from_element(1, 1, r),
    )
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Uniform box sampler for i.i.d. training states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSampler {
    /// Half-widths of the box around the origin for `[x, v, θ, ω]`.
    pub bounds: [f64; 4],
}

impl Default for StateSampler {
    fn default() -> Self {
        Self { bounds: [1.0, 1.0, 0.2, 1.0] }
    }
}

impl StateSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PendulumState {
        let mut a = [0.0; 4];
        for (v, b) in a.iter_mut().zip(self.bounds) {
            *v = if b > 0.0 { Uniform::new_inclusive(-b, b).sample(rng) } else { 0.0 };
        }
        PendulumState::from_array(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlSample {
    pub state: PendulumState,
    pub action: f64,
}

/// `n` states drawn i.i.d. from `sampler` with actions `−K x`, plus Gaussian
/// noise of standard deviation `noise_std` when given.
pub fn generate_samples<R: Rng + ?Sized>(
    gain: &LqrGain,
    n: usize,
    sampler: &StateSampler,
    noise_std: Option<f64>,
    rng: &mut R,
) -> Result<Vec<ControlSample>> {
    if n == 0 {
        return Err(Error::domain("sample count must be positive"));
    }
    let noise = match noise_std {
        Some(s) => Some(Normal::new(0.0, s).map_err(|e| Error::domain(e.to_string()))?),
        None => None,
    };
    Ok((0..n)
        .map(|_| {
            let state = sampler.sample(rng);
            let mut action = gain.action(&state);
            if let Some(nd) = &noise {
                action += nd.sample(rng);
            }
            ControlSample { state, action }
        })
        .collect())
}

/// When a rollout counts as stabilized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessCriterion {
    pub steps: usize,
    pub theta_limit: f64,
    pub x_limit: f64,
    pub theta_final: f64,
    /// Initial angles are `linspace(−theta0_range, theta0_range, n_initial)`.
    pub theta0_range: f64,
    pub n_initial: usize,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self { steps: 500, theta_limit: 0.5, x_limit: 5.0, theta_final: 0.05, theta0_range: 0.1, n_initial: 20 }
    }
}

impl SuccessCriterion {
    pub fn initial_states(&self) -> Vec<PendulumState> {
        let n = self.n_initial;
        (0..n)
            .map(|i| {
                let th =
                    if n == 1 { 0.0 } else { -self.theta0_range + 2.0 * self.theta0_range * i as f64 / (n - 1) as f64 };
                PendulumState { theta_p: th, ..Default::default() }
            })
            .collect()
    }
}

/// Roll out `policy` from `init` and report whether it stabilized.
pub fn rollout_stabilizes<F>(
    params: &PendulumParams,
    init: PendulumState,
    criterion: &SuccessCriterion,
    policy: &mut F,
) -> Result<bool>
where
    F: FnMut(&PendulumState) -> Result<f64>,
{
    let mut s = init;
    for _ in 0..criterion.steps {
        let u = policy(&s)?;
        s = match step(params, &s, u) {
            Ok(n) => n,
            Err(Error::Divergence(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        if s.theta_p.abs() > criterion.theta_limit || s.x_c.abs() > criterion.x_limit {
            return Ok(false);
        }
    }
    Ok(s.theta_p.abs() <= criterion.theta_final)
}

/// Fraction of the criterion's initial conditions stabilized by `policy`.
pub fn success_rate<F>(params: &PendulumParams, criterion: &SuccessCriterion, mut policy: F) -> Result<f64>
where
    F: FnMut(&PendulumState) -> Result<f64>,
{
    let inits = criterion.initial_states();
    let mut ok = 0usize;
    for s in &inits {
        if rollout_stabilizes(params, *s, criterion, &mut policy)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / inits.len() as f64)
}

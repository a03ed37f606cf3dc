//! Standard normal density and distribution function.

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density φ(t).
pub fn pdf(t: f64) -> f64 {
    if t.abs() > 30.0 {
        (-0.5 * t * t - HALF_LN_2PI).exp()
    } else {
        FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
    }
}

/// Standard normal distribution function Φ(t), via the complementary error
/// function so that both tails keep full relative precision.
pub fn cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Density of N(mean, var) evaluated at x.
pub fn density(x: f64, mean: f64, var: f64) -> f64 {
    let sd = var.sqrt();
    pdf((x - mean) / sd) / sd
}

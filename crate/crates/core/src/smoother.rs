//! Backward pass: measurement at the head output followed by layerwise
//! Rauch–Tung–Striebel updates of the pre-activations, the weights and the
//! layer inputs.

use nalgebra::{DMatrix, DVector};

use crate::bayes_head::{forward, input_state, HeadConfig, LayerTrace, OutputActivation, WeightState};
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{linear_cross_cov_zu, GaussianState};

/// Replacement for a zero observation covariance.
pub const SIGMA_DATA_JITTER: f64 = 1e-9;

/// How the observation enters the output-layer posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementUpdate {
    /// The output posterior is set to the target with covariance `Σ_data`.
    Assign,
    /// The target is treated as a noisy observation of the output with noise
    /// covariance `Σ_data` and fused by a Kalman update. Coincides with
    /// `Assign` as `Σ_data → 0`.
    Fuse,
}

/// Observed target and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub y_target: DVector<f64>,
    pub sigma_data: DMatrix<f64>,
}

impl MeasurementModel {
    /// Arbitrary finite target with a PSD covariance; an all-zero covariance is
    /// replaced by `1e-9 · I`.
    pub fn new(y_target: DVector<f64>, mut sigma_data: DMatrix<f64>) -> Result<Self> {
        let n = y_target.len();
        if sigma_data.nrows() != n || sigma_data.ncols() != n {
            return Err(Error::domain(format!(
                "target has length {n} but observation covariance is {}x{}",
                sigma_data.nrows(),
                sigma_data.ncols()
            )));
        }
        if y_target.iter().chain(sigma_data.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite measurement"));
        }
        if sigma_data.iter().all(|v| *v == 0.0) {
            sigma_data = DMatrix::identity(n, n) * SIGMA_DATA_JITTER;
        }
        if !linalg::is_symmetric(&sigma_data) || !linalg::is_psd(&sigma_data) {
            return Err(Error::domain("observation covariance must be symmetric PSD"));
        }
        Ok(Self { y_target, sigma_data })
    }

    /// `Σ_data = s · I`.
    pub fn scalar(y_target: DVector<f64>, s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::domain(format!("observation variance {s} must be finite and nonnegative")));
        }
        let n = y_target.len();
        Self::new(y_target, DMatrix::identity(n, n) * s)
    }

    /// One-hot targets, one row per token, with `Σ_data = s · I`.
    pub fn one_hot(y_hat: &DMatrix<f64>, s: f64) -> Result<Self> {
        for r in 0..y_hat.nrows() {
            let row = y_hat.row(r);
            let ones = row.iter().filter(|v| **v == 1.0).count();
            if ones != 1 || row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::domain(format!("target row {r} is not one-hot")));
            }
        }
        Self::scalar(DVector::from_iterator(y_hat.len(), y_hat.transpose().iter().copied()), s)
    }
}

/// Posterior of the head output `z^L` given the measurement.
pub fn inject_measurement(trace: &LayerTrace, m: &MeasurementModel, mode: MeasurementUpdate) -> Result<GaussianState> {
    let out = trace.output();
    if m.y_target.len() != out.dim() {
        return Err(Error::domain(format!("target has length {}, head output has {}", m.y_target.len(), out.dim())));
    }
    match mode {
        MeasurementUpdate::Assign => Ok(GaussianState { mean: m.y_target.clone(), cov: m.sigma_data.clone() }),
        MeasurementUpdate::Fuse => {
            let s = &out.cov + &m.sigma_data;
            let gain = linalg::spd_right_solve(&s, &out.cov).map_err(|e| e.at_layer(trace.u.len()))?;
            let mean = &out.mean + &gain * (&m.y_target - &out.mean);
            let mut cov = &out.cov - &gain * &out.cov;
            linalg::clip_to_psd(&mut cov);
            Ok(GaussianState { mean, cov })
        }
    }
}

/// Posteriors produced by one layer of the backward pass.
#[derive(Debug, Clone)]
pub struct LayerPosterior {
    pub u: GaussianState,
    pub w: GaussianState,
    /// Posterior of the layer input `z^{i-1}`.
    pub z_prev: GaussianState,
}

/// Backward update of layer `layer` (0-based) given the posterior of its
/// output `z_post`.
///
/// The pre-activation gain is `Σ_{u,z} Σ_{z,z}⁻¹`, with only the diagonal of
/// `Σ_{u,z}` at hidden layers. The weight and input gains share one solve
/// against `Σ_{u,u}` and use the pre-activation innovation.
pub fn rts_layer_update(
    trace: &LayerTrace,
    layer: usize,
    w: &GaussianState,
    z_post: &GaussianState,
    config: &HeadConfig,
) -> Result<LayerPosterior> {
    let l = trace.u.len();
    if layer >= l {
        return Err(Error::domain(format!("layer index {layer} out of range for {l} layers")));
    }
    let tag = layer + 1;
    let u = &trace.u[layer];
    let z = &trace.z[layer + 1];
    if z_post.dim() != z.dim() {
        return Err(Error::domain(format!("posterior has dimension {}, layer output has {}", z_post.dim(), z.dim())));
    }

    // pre-activation posterior
    let u_post = if layer + 1 == l && config.output == OutputActivation::Identity {
        z_post.clone()
    } else {
        let cross = if layer + 1 == l {
            trace.up_cross.matrix.clone()
        } else {
            DMatrix::from_diagonal(&trace.uz_cross_diag[layer])
        };
        let k_u = linalg::spd_right_solve(&z.cov, &cross).map_err(|e| e.at_layer(tag))?;
        let mean = &u.mean + &k_u * (&z_post.mean - &z.mean);
        let mut cov = &u.cov + &k_u * (&z_post.cov - &z.cov) * k_u.transpose();
        if linalg::clip_to_psd(&mut cov) {
            log::trace!("layer {tag}: clipped pre-activation posterior");
        }
        GaussianState { mean, cov }
    };

    // weight and input gains
    let shape = config.shape(layer, trace.tokens);
    let wu = &trace.wu_cross[layer].matrix;
    let zu = linear_cross_cov_zu(&trace.z[layer], &w.mean, shape)?.matrix;
    let (p, nz) = (wu.nrows(), zu.nrows());
    let mut stacked = DMatrix::zeros(p + nz, wu.ncols());
    stacked.rows_mut(0, p).copy_from(wu);
    stacked.rows_mut(p, nz).copy_from(&zu);
    let gains = linalg::spd_right_solve(&u.cov, &stacked).map_err(|e| e.at_layer(tag))?;
    let k_w = gains.rows(0, p);
    let k_z = gains.rows(p, nz);

    let dmu = &u_post.mean - &u.mean;
    let dcov = &u_post.cov - &u.cov;

    let w_mean = &w.mean + &k_w * &dmu;
    let mut w_cov = w.cov.clone();
    let t = &k_w * &dcov;
    w_cov.gemm(1.0, &t, &k_w.transpose(), 1.0);
    linalg::symmetrize(&mut w_cov);
    linalg::check_psd_cheap(&w_cov, "weight covariance").map_err(|e| e.at_layer(tag))?;

    let z_prev = &trace.z[layer];
    let zp_mean = &z_prev.mean + &k_z * &dmu;
    let mut zp_cov = &z_prev.cov + &k_z * &dcov * k_z.transpose();
    linalg::clip_to_psd(&mut zp_cov);

    Ok(LayerPosterior {
        u: u_post,
        w: GaussianState { mean: w_mean, cov: w_cov },
        z_prev: GaussianState { mean: zp_mean, cov: zp_cov },
    })
}

/// Run the backward pass over all layers from the output posterior and
/// return the updated weights.
pub fn backward(
    trace: &LayerTrace,
    weights: &WeightState,
    z_out_post: GaussianState,
    config: &HeadConfig,
) -> Result<WeightState> {
    let mut layers = Vec::with_capacity(config.layers());
    let mut z_post = z_out_post;
    for i in (0..config.layers()).rev() {
        let post = rts_layer_update(trace, i, &weights.layers[i], &z_post, config)?;
        layers.push(post.w);
        z_post = post.z_prev;
    }
    layers.reverse();
    Ok(WeightState { layers })
}

/// Condition the weights on one preprocessed batch: forward pass on the rows
/// of `h`, measurement at the output, then the backward pass.
pub fn sequential_update(
    weights: &WeightState,
    h: &DMatrix<f64>,
    m: &MeasurementModel,
    config: &HeadConfig,
    mode: MeasurementUpdate,
) -> Result<WeightState> {
    let z0 = input_state(h, config)?;
    let trace = forward(weights, &z0, config)?;
    let post = inject_measurement(&trace, m, mode)?;
    backward(&trace, weights, post, config)
}

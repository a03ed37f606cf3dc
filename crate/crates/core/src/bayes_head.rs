//! Bayesian MLP head: configuration, weight distribution, identity-preserving
//! initialization and the moment-propagating forward pass.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::moments::{
    self, linear_forward_with_cross, mean_matrix, relu_moments, softmax_moments, CrossCov, GaussianState, LinearShape,
};

/// Nonlinearity applied after the last linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Blockwise softmax over each token's `d_o` outputs.
    Softmax,
    /// No nonlinearity; used for linear-Gaussian checks.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Input (embedding) dimension.
    pub d: usize,
    /// Output dimension.
    pub d_o: usize,
    /// Layer widths `n_1..n_L`; the last one equals `d_o`.
    pub widths: Vec<usize>,
    /// Initial weight variance.
    pub weight_eps: f64,
    /// Variance assigned to deterministic inputs.
    pub input_eps: f64,
    pub output: OutputActivation,
}

impl HeadConfig {
    /// Two layers of widths `2d` and `d_o` with a softmax output.
    pub fn new(d: usize, d_o: usize, eps: f64) -> Self {
        Self { d, d_o, widths: vec![2 * d, d_o], weight_eps: eps, input_eps: eps, output: OutputActivation::Softmax }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn shape(&self, layer: usize, tokens: usize) -> LinearShape {
        let n_in = if layer == 0 { self.d } else { self.widths[layer - 1] };
        LinearShape { tokens, n_in, n_out: self.widths[layer] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_o == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("dimensions and widths must be positive".into()));
        }
        if *self.widths.last().unwrap() != self.d_o {
            return Err(Error::Config(format!(
                "last width {} must equal the output dimension {}",
                self.widths.last().unwrap(),
                self.d_o
            )));
        }
        if !(self.weight_eps >= 0.0 && self.weight_eps.is_finite())
            || !(self.input_eps >= 0.0 && self.input_eps.is_finite())
        {
            return Err(Error::Config("variances must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Extra requirements of [`init_head`]: at least two layers and every
    /// hidden width at least `2d`.
    pub fn validate_for_init(&self) -> Result<()> {
        self.validate()?;
        if self.layers() < 2 {
            return Err(Error::Config("initialization needs at least two layers".into()));
        }
        if let Some((i, n)) = self.widths[..self.layers() - 1].iter().enumerate().find(|(_, n)| **n < 2 * self.d) {
            return Err(Error::Config(format!("hidden width n_{} = {n} is below 2d = {}", i + 1, 2 * self.d)));
        }
        if !(self.weight_eps > 0.0) {
            return Err(Error::Config("initial weight variance must be positive".into()));
        }
        Ok(())
    }
}

/// Per-layer Gaussian distribution over the weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub layers: Vec<GaussianState>,
}

impl WeightState {
    /// Full symmetry and PSD checks on every layer.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| Error::Domain(format!("layer {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn check_shapes(&self, config: &HeadConfig) -> Result<()> {
        if self.layers.len() != config.layers() {
            return Err(Error::domain(format!(
                "weight state has {} layers, config has {}",
                self.layers.len(),
                config.layers()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let n = config.shape(i, 1).n_weights();
            if l.dim() != n {
                return Err(Error::domain(format!("layer {} has {} weights, expected {n}", i + 1, l.dim())));
            }
        }
        Ok(())
    }

    /// Sum of the traces of all weight covariances.
    pub fn total_variance(&self) -> f64 {
        self.layers.iter().map(|l| l.cov.trace()).sum()
    }
}

/// Moments retained by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub tokens: usize,
    /// `n_0 = d, n_1, .., n_L`.
    pub widths: Vec<usize>,
    /// `z⁰ .. z^L`; `z⁰` is the input and `z^L` the output.
    pub z: Vec<GaussianState>,
    /// `u¹ .. u^L`.
    pub u: Vec<GaussianState>,
    /// Diagonal of `Σ_{u^i,z^i}` for the hidden layers.
    pub uz_cross_diag: Vec<DVector<f64>>,
    /// `Σ_{u^L,z^L}`.
    pub up_cross: CrossCov,
    /// `Σ_{w^i,u^i}` per layer.
    pub wu_cross: Vec<CrossCov>,
}

impl LayerTrace {
    pub fn output(&self) -> &GaussianState {
        self.z.last().unwrap()
    }
}

/// Mean weights reproducing `h ↦ W_Oᵀ [h; 1]` through the ReLU layers.
///
/// The first layer passes `[max(h,0); max(−h,0)]`, middle layers recombine
/// and split again, and the last layer recombines and applies `W_O`. All
/// weight covariances start at `weight_eps · I`.
pub fn init_head(config: &HeadConfig, w_o: &DMatrix<f64>) -> Result<WeightState> {
    config.validate_for_init()?;
    let d = config.d;
    if w_o.nrows() != d + 1 || w_o.ncols() != config.d_o {
        return Err(Error::Config(format!(
            "output matrix is {}x{}, expected {}x{}",
            w_o.nrows(),
            w_o.ncols(),
            d + 1,
            config.d_o
        )));
    }
    let l = config.layers();
    let mut layers = Vec::with_capacity(l);
    for i in 0..l {
        let shape = config.shape(i, 1);
        let q = shape.block();
        // column j of `w` is neuron j's weights, bias in the last row
        let mut w = DMatrix::zeros(q, shape.n_out);
        if i == l - 1 {
            let mut r = DMatrix::zeros(q, d + 1);
            for c in 0..d {
                r[(c, c)] = 1.0;
                r[(d + c, c)] = -1.0;
            }
            r[(shape.n_in, d)] = 1.0;
            w = r * w_o;
        } else if i == 0 {
            for a in 0..d {
                w[(a, a)] = 1.0;
                w[(a, d + a)] = -1.0;
            }
        } else {
            for c in 0..d {
                w[(c, c)] = 1.0;
                w[(d + c, c)] = -1.0;
                w[(c, d + c)] = -1.0;
                w[(d + c, d + c)] = 1.0;
            }
        }
        let mean = DVector::from_column_slice(w.as_slice());
        layers.push(GaussianState::isotropic(mean, config.weight_eps));
    }
    Ok(WeightState { layers })
}

/// Propagate the input moments `z0` (dimension `tokens · d`) through the head.
pub fn forward(weights: &WeightState, z0: &GaussianState, config: &HeadConfig) -> Result<LayerTrace> {
    config.validate()?;
    weights.check_shapes(config)?;
    if z0.dim() == 0 || z0.dim() % config.d != 0 {
        return Err(Error::domain(format!("input dimension {} is not a multiple of d = {}", z0.dim(), config.d)));
    }
    let tokens = z0.dim() / config.d;
    let l = config.layers();
    let mut z = vec![z0.clone()];
    let mut u = Vec::with_capacity(l);
    let mut uz_cross_diag = Vec::with_capacity(l - 1);
    let mut wu_cross = Vec::with_capacity(l);
    let mut up_cross = None;
    for i in 0..l {
        let shape = config.shape(i, tokens);
        let (ui, wu) = linear_forward_with_cross(&weights.layers[i], &z[i], shape).map_err(|e| e.at_layer(i + 1))?;
        wu_cross.push(wu);
        if i + 1 < l {
            let (zi, cross) = relu_moments(&ui).map_err(|e| e.at_layer(i + 1))?;
            uz_cross_diag.push(cross);
            z.push(zi);
        } else {
            match config.output {
                OutputActivation::Softmax => {
                    let sm = softmax_moments(&ui, config.d_o).map_err(|e| e.at_layer(i + 1))?;
                    up_cross = Some(sm.up_cross);
                    z.push(sm.p);
                }
                OutputActivation::Identity => {
                    up_cross = Some(CrossCov::new(ui.cov.clone()));
                    z.push(ui.clone());
                }
            }
        }
        u.push(ui);
    }
    let mut widths = vec![config.d];
    widths.extend_from_slice(&config.widths);
    Ok(LayerTrace { tokens, widths, z, u, uz_cross_diag, up_cross: up_cross.unwrap(), wu_cross })
}

/// Input state for deterministic representations `h` (rows are tokens):
/// mean `vec(h)`, covariance `input_eps · I`.
pub fn input_state(h: &DMatrix<f64>, config: &HeadConfig) -> Result<GaussianState> {
    if h.ncols() != config.d {
        return Err(Error::domain(format!("input has {} columns, expected d = {}", h.ncols(), config.d)));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite input"));
    }
    // row-major flattening: token-major vector
    let mean = DVector::from_iterator(h.len(), h.transpose().iter().copied());
    Ok(GaussianState::isotropic(mean, config.input_eps))
}

/// Predictive output moments for deterministic inputs `h`.
pub fn predict(weights: &WeightState, h: &DMatrix<f64>, config: &HeadConfig) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let z0 = input_state(h, config)?;
    let trace = forward(weights, &z0, config)?;
    let out = trace.z.into_iter().last().unwrap();
    Ok((out.mean, out.cov))
}

/// Output mean of a single-token prediction without building covariances.
///
/// For a two-layer head with a softmax output the mean depends only on the
/// diagonal of the first layer's pre-activation covariance, which is cheap to
/// evaluate per input. Other configurations fall back to [`predict`].
#[derive(Debug, Clone)]
pub struct MeanPredictor {
    config: HeadConfig,
    kind: PredictorKind,
}

#[derive(Debug, Clone)]
enum PredictorKind {
    TwoLayer {
        m1: DMatrix<f64>,
        /// Per-neuron covariance blocks of the first layer.
        b1: Vec<DMatrix<f64>>,
        /// Squared row norm of each neuron's input weights plus the trace of
        /// its input-weight covariance; multiplies the input variance.
        m1_sq: DVector<f64>,
        m2: DMatrix<f64>,
    },
    General(WeightState),
}

impl MeanPredictor {
    pub fn new(weights: &WeightState, config: &HeadConfig) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(config)?;
        let kind = if config.layers() == 2 && config.output == OutputActivation::Softmax {
            let s1 = config.shape(0, 1);
            let q = s1.block();
            let m1 = mean_matrix(&weights.layers[0].mean, s1);
            let b1: Vec<DMatrix<f64>> =
                (0..s1.n_out).map(|j| weights.layers[0].cov.view((j * q, j * q), (q, q)).into_owned()).collect();
            let m1_sq = DVector::from_fn(s1.n_out, |j, _| {
                let b: &DMatrix<f64> = &b1[j];
                m1.row(j).columns(0, s1.n_in).norm_squared() + b.view((0, 0), (s1.n_in, s1.n_in)).trace()
            });
            let m2 = mean_matrix(&weights.layers[1].mean, config.shape(1, 1));
            PredictorKind::TwoLayer { m1, b1, m1_sq, m2 }
        } else {
            PredictorKind::General(weights.clone())
        };
        Ok(Self { config: config.clone(), kind })
    }

    /// Output mean for one representation vector `h` of length `d`.
    pub fn predict(&self, h: &[f64]) -> Result<DVector<f64>> {
        if h.len() != self.config.d || h.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("predictor input must be a finite vector of length d"));
        }
        match &self.kind {
            PredictorKind::TwoLayer { m1, b1, m1_sq, m2 } => {
                let mut ht = DVector::from_element(h.len() + 1, 1.0);
                ht.rows_mut(0, h.len()).copy_from_slice(h);
                let mu1 = m1 * &ht;
                let mut z1 = DVector::from_element(mu1.len() + 1, 1.0);
                for j in 0..mu1.len() {
                    let var = self.config.input_eps * m1_sq[j] + ht.dot(&(&b1[j] * &ht));
                    z1[j] = moments::relu_mean(mu1[j], var.max(0.0))?;
                }
                Ok(moments::softmax_blocks(&(m2 * z1), self.config.d_o))
            }
            PredictorKind::General(w) => {
                let hm = DMatrix::from_row_slice(1, h.len(), h);
                Ok(predict(w, &hm, &self.config)?.0)
            }
        }
    }
}

/// Check the PSD invariants of every covariance in a trace.
pub fn validate_trace(trace: &LayerTrace) -> Result<()> {
    for s in trace.z.iter().chain(trace.u.iter()) {
        s.validate()?;
    }
    if !trace.up_cross.matrix.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("non-finite output cross-covariance"));
    }
    Ok(())
}

//! Point-estimate copy of the head trained by gradient descent on a bounded
//! sample buffer.

use kbt_core::bayes_head::{HeadConfig, OutputActivation, WeightState};
use kbt_core::moments::{mean_matrix, softmax_blocks};
use kbt_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

/// Deterministic MLP with the same architecture as the Bayesian head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMlp {
    /// Layer `i` maps `[z; 1]` to `u = W z̃`; shape `n_out × (n_in + 1)`.
    pub weights: Vec<DMatrix<f64>>,
    pub output: OutputActivation,
}

/// One training example: a representation row and its target token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub h: DVector<f64>,
    pub target: usize,
}

impl HeadMlp {
    /// Mean weights of a Bayesian head.
    pub fn from_weights(w: &WeightState, config: &HeadConfig) -> Result<Self> {
        w.check_shapes(config)?;
        let weights = w.layers.iter().enumerate().map(|(i, l)| mean_matrix(&l.mean, config.shape(i, 1))).collect();
        Ok(Self { weights, output: config.output })
    }

    fn activations(&self, h: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut zs = vec![h.clone()];
        let last = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            let z = zs.last().unwrap();
            let n = z.len();
            let mut u = w.columns(0, n) * z;
            u += w.column(n);
            let next = if i < last {
                u.map(|v| v.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Softmax => softmax_blocks(&u, u.len()),
                    OutputActivation::Identity => u,
                }
            };
            zs.push(next);
        }
        zs
    }

    /// Output distribution (or identity output) for one representation row.
    pub fn predict(&self, h: &DVector<f64>) -> DVector<f64> {
        self.activations(h).pop().unwrap()
    }

    /// Cross-entropy of `ex`, with `scale ×` its gradient added to `grads`.
    fn accumulate(&self, ex: &HeadExample, scale: f64, grads: &mut [DMatrix<f64>]) -> f64 {
        let zs = self.activations(&ex.h);
        let p = zs.last().unwrap();
        let loss = -p[ex.target].max(f64::MIN_POSITIVE).ln();
        // dL/du at the last layer: p − e_t for softmax with cross-entropy
        let mut delta = p.clone();
        delta[ex.target] -= 1.0;
        for i in (0..self.weights.len()).rev() {
            let z = &zs[i];
            let n = z.len();
            let g = &mut grads[i];
            for j in 0..delta.len() {
                let dj = scale * delta[j];
                for a in 0..n {
                    g[(j, a)] += dj * z[a];
                }
                g[(j, n)] += dj;
            }
            if i > 0 {
                let back = self.weights[i].columns(0, n).transpose() * &delta;
                delta = back.zip_map(z, |d, zi| if zi > 0.0 { d } else { 0.0 });
            }
        }
        loss
    }

    /// `epochs` passes of minibatch gradient descent over `data` with the
    /// given step size, shuffling each epoch. Returns the last epoch's mean
    /// loss.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &[HeadExample],
        epochs: usize,
        lr: f64,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if self.output != OutputActivation::Softmax {
            return Err(Error::Config("gradient retraining needs a softmax output".into()));
        }
        if data.is_empty() || batch_size == 0 {
            return Err(Error::Domain("empty training buffer or zero batch size".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut grads: Vec<DMatrix<f64>> = self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut mean = 0.0;
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for batch in order.chunks(batch_size) {
                grads.iter_mut().for_each(|g| g.fill(0.0));
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    total += self.accumulate(&data[i], scale, &mut grads);
                }
                for (w, g) in self.weights.iter_mut().zip(&grads) {
                    *w -= lr * g;
                }
            }
            mean = total / data.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence(format!("baseline retraining loss became {mean} in epoch {epoch}")));
            }
        }
        Ok(mean)
    }
}

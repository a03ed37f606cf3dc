use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{TransformerModel, SOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seed for the per-epoch shuffles.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-2, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: TransformerModel,
    /// Mean cross-entropy over each epoch, measured during the epoch.
    pub epoch_loss: Vec<f64>,
}

/// Minibatch gradient descent with a fixed step on the cross-entropy of the
/// action token predicted after `[state, SOS]`.
pub fn pretrain(model: &TransformerModel, data: &[([f64; 4], usize)], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::domain("pretraining data is empty"));
    }
    if cfg.batch_size == 0 || !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config("batch size must be positive and the step size finite and nonnegative".into()));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.n_params()];
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let (s, t) = &data[i];
                total += model.loss_and_grad(std::slice::from_ref(s), &[SOS], &[*t], w, Some(&mut grad))?;
            }
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence(format!("pretraining loss became {mean} in epoch {epoch}")));
        }
        log::debug!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(PretrainReport { model, epoch_loss })
}

/// Top-1 token accuracy after `[state, SOS]`.
pub fn accuracy(model: &TransformerModel, data: &[([f64; 4], usize)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    let mut hits = 0;
    for (s, t) in data {
        let p = model.predict_probs(std::slice::from_ref(s), &[SOS])?;
        let row: Vec<f64> = p.row(0).iter().copied().collect();
        let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if best == *t {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

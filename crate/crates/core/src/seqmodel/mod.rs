//! Tiny decision transformer: tokenizer, model, preprocessing into head
//! inputs, pretraining and the action dataset format.

mod dataset;
mod tokenizer;
mod train;
mod transformer;

pub use dataset::{ActionDataset, DatasetRow};
pub use tokenizer::{Tokenizer, SOS};
pub use train::{accuracy, pretrain, PretrainConfig, PretrainReport};
pub use transformer::{TransformerConfig, TransformerModel, CHECKPOINT_KIND};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Representations and one-hot targets for every prefix of an output
/// sequence, stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedBatch {
    pub h_hat: DMatrix<f64>,
    pub y_hat: DMatrix<f64>,
}

impl PreprocessedBatch {
    pub fn rows(&self) -> usize {
        self.h_hat.nrows()
    }
}

/// For each prefix `Y[..i]`, `i = 1..y−1`, append the `i` representation
/// rows `T1(X, Y[..i])` and the one-hot targets `Y[1..=i]`.
pub fn preprocess_pair(
    model: &TransformerModel,
    tokenizer: &Tokenizer,
    states: &[[f64; 4]],
    y: &[usize],
) -> Result<PreprocessedBatch> {
    if y.len() < 2 {
        return Err(Error::domain(format!("output sequence has length {}, need at least 2", y.len())));
    }
    let rows = y.len() * (y.len() - 1) / 2;
    let d = model.config.d_model;
    let mut h_hat = DMatrix::zeros(rows, d);
    let mut y_hat = DMatrix::zeros(rows, tokenizer.d_world);
    let mut r = 0;
    for i in 1..y.len() {
        let h = model.t1_forward(states, &y[..i])?;
        for k in 0..i {
            h_hat.row_mut(r).copy_from(&h.row(k));
            y_hat.row_mut(r).copy_from(&tokenizer.one_hot(y[k + 1])?.transpose());
            r += 1;
        }
    }
    Ok(PreprocessedBatch { h_hat, y_hat })
}

/// Representation of a single state with the prefix `[SOS]`.
pub fn state_representation(model: &TransformerModel, state: &[f64; 4]) -> Result<Vec<f64>> {
    let h = model.t1_forward(std::slice::from_ref(state), &[SOS])?;
    Ok(h.row(0).iter().copied().collect())
}

/// Force for the most probable token in `probs`; the start marker decodes
/// to zero force.
pub fn decode_argmax(tokenizer: &Tokenizer, probs: &[f64]) -> f64 {
    let mut best = 0;
    for (k, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = k;
        }
    }
    tokenizer.detokenize(best).unwrap_or(0.0)
}

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Token id of the start-of-sequence marker.
pub const SOS: usize = 0;

/// Uniform binning of actions in `[-u_max, u_max]`; token `k ≥ 1` is bin
/// `k − 1`, token 0 is the start-of-sequence marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tokenizer {
    /// Vocabulary size (bins + 1).
    pub d_world: usize,
    pub u_max: f64,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { d_world: 17, u_max: 10.0 }
    }
}

impl Tokenizer {
    pub fn new(d_world: usize, u_max: f64) -> Result<Self> {
        if d_world < 2 || !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::Config(format!("invalid tokenizer: d_world = {d_world}, u_max = {u_max}")));
        }
        Ok(Self { d_world, u_max })
    }

    pub fn bins(&self) -> usize {
        self.d_world - 1
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.u_max / self.bins() as f64
    }

    /// Token of `a`, after clamping to `[-u_max, u_max]`.
    pub fn tokenize(&self, a: f64) -> Result<usize> {
        if !a.is_finite() {
            return Err(Error::domain(format!("cannot tokenize action {a}")));
        }
        let a = a.clamp(-self.u_max, self.u_max);
        let bin = ((a + self.u_max) / self.bin_width()).floor() as usize;
        Ok(1 + bin.min(self.bins() - 1))
    }

    /// Bin center of an action token.
    pub fn detokenize(&self, token: usize) -> Result<f64> {
        if token == SOS || token >= self.d_world {
            return Err(Error::domain(format!("token {token} is not an action token")));
        }
        Ok(-self.u_max + (token as f64 - 0.5) * self.bin_width())
    }

    pub fn one_hot(&self, token: usize) -> Result<DVector<f64>> {
        if token >= self.d_world {
            return Err(Error::domain(format!("token {token} outside vocabulary of {}", self.d_world)));
        }
        let mut v = DVector::zeros(self.d_world);
        v[token] = 1.0;
        Ok(v)
    }
}

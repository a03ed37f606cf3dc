//! Sequential Bayesian fine-tuning of a transformer output head by closed-form
//! moment propagation and a layerwise Rauch–Tung–Striebel backward pass,
//! together with a cart-pole environment and a small decision transformer.

pub mod bayes_head;
pub mod checkpoint;
pub mod control;
pub mod error;
pub mod linalg;
pub mod moments;
pub mod normal;
pub mod seqmodel;
pub mod smoother;

pub use error::{Error, Result};

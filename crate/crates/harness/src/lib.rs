//! Experiment orchestration for sequential Bayesian fine-tuning of the
//! decision transformer's head on a shifted cart-pole.

pub mod baseline;
pub mod config;
pub mod experiment;
pub mod metrics;

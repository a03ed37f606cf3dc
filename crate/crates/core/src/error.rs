use thiserror::Error;

/// Errors produced by the moment kernels, the Bayesian head, the smoother and
/// the sequence model.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation (negative variance,
    /// mismatched dimensions, non-finite input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid model or head configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A covariance could not be repaired or a gain could not be computed.
    #[error("numerical breakdown{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    NumericalBreakdown { layer: Option<usize>, message: String },

    /// Training or simulation produced non-finite values.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A checkpoint or dataset file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn breakdown(layer: Option<usize>, msg: impl Into<String>) -> Self {
        Error::NumericalBreakdown { layer, message: msg.into() }
    }

    /// Attach a layer index to a numerical breakdown that does not carry one yet.
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::NumericalBreakdown { layer: None, message } => {
                Error::NumericalBreakdown { layer: Some(layer), message }
            }
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

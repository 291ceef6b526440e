use thiserror::Error;

/// Errors raised by the filtering, weighting and consensus routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is singular or not positive definite: {context} (max |diag| {max_diag:.3e}, min diag {min_diag:.3e})")]
    Singular {
        context: String,
        max_diag: f64,
        min_diag: f64,
    },

    #[error("model evaluation produced non-finite output in {0}")]
    ModelEvaluation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("step size {alpha} is not below the stability bound {bound}")]
    StepSize { alpha: f64, bound: f64 },

    #[error("push-sum protocol violation at round {round}: {detail}")]
    Protocol { round: usize, detail: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn singular(context: impl Into<String>, m: &nalgebra::DMatrix<f64>) -> Self {
        let diag = m.diagonal();
        let max_diag = diag.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let min_diag = diag.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        Error::Singular {
            context: context.into(),
            max_diag,
            min_diag,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("missing oracle: {0}")]
    MissingOracle(String),

    #[error("simulation blew up at step {step}")]
    SimulationBlowup { step: usize },

    #[error("{what} did not converge: error estimate {error:e} above tolerance {tolerance:e}")]
    Unconverged { what: String, error: f64, tolerance: f64 },

    #[error("unsupported functional: {0}")]
    UnsupportedFunctional(String),

    #[error("insufficient signal: {usable} usable points, {required} required")]
    InsufficientSignal { usable: usize, required: usize },

    #[error("ladder is not geometric with ratio 2: {0:?}")]
    NonGeometricLadder(Vec<usize>),

    #[error("model is not affine with constant diffusion: {0}")]
    NotAffine(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

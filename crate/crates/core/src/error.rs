use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix exponential failed: {0}")]
    MatrixExpFailure(String),

    #[error("invalid quantum state: {0}")]
    InvalidState(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Taylor expansion order {0} is not supported (maximum is 2)")]
    UnsupportedOrder(usize),

    #[error("coefficient for {parameter} is not affine: extracted {coarse} vs {fine}")]
    NonAffineDependence {
        parameter: &'static str,
        coarse: f64,
        fine: f64,
    },

    #[error("every particle likelihood underflowed to zero")]
    DegenerateUpdate,

    #[error("ensemble covariance is not positive semidefinite")]
    SingularCovariance,

    #[error("no reference pulse was supplied for gate validation")]
    MissingReferencePulse,

    #[error("campaign aborted in epoch {epoch}: {message}")]
    CampaignAborted { epoch: usize, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

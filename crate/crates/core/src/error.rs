use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is singular or ill-conditioned (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("symmetric eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("query outside the field domain: coordinate {axis} = {value} not in [{lower}, {upper}]")]
    OutOfDomain {
        /// Spatial axis index, or `usize::MAX` for the time coordinate.
        axis: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("trajectory left the domain at t = {time}: {source}")]
    TrajectoryExit {
        time: f64,
        position: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "Jacobian consistency defect {defect:e} exceeds threshold {threshold:e}; \
         reduce the step size or shorten the horizon"
    )]
    Conditioning { defect: f64, threshold: f64 },

    #[error("matrix has eigenvalue {eigenvalue:e}, too negative to be roundoff")]
    NotSemidefinite { eigenvalue: f64 },

    #[error("measure undefined: {0}")]
    UndefinedMeasure(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scan aborted at grid point {point:?}: {source}")]
    ScanAborted {
        point: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("cannot resume: {0}")]
    Resume(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors raised by numerical breakdown rather than bad input
    /// or I/O.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::Singular { .. }
            | Error::NoConvergence { .. }
            | Error::OutOfDomain { .. }
            | Error::TrajectoryExit { .. }
            | Error::Conditioning { .. }
            | Error::NotSemidefinite { .. }
            | Error::UndefinedMeasure(_)
            | Error::Estimation(_) => true,
            Error::ScanAborted { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

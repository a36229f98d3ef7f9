use thiserror::Error;

/// Errors produced by the exponential-family algebra, the solvers and the round engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("precision is not positive definite{}", context(.0))]
    NonPositivePrecision(String),
    #[error("implied covariance of the moment parameter is not positive definite{}", context(.0))]
    DegenerateMoment(String),
    #[error("family mismatch: {0}")]
    FamilyMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid family descriptor: {0}")]
    InvalidFamily(String),
    #[error("estimator {estimator} is not supported for {loss} losses")]
    EstimatorUnsupported { estimator: String, loss: String },
    #[error("result is not a valid member of the family: {0}")]
    ResultNotInFamily(String),
    #[error("loss is not conjugate to the family: {0}")]
    NotConjugate(String),
    #[error("natural-gradient iterate left the family after {halvings} step halvings (step {step})")]
    PrecisionEscape { step: usize, halvings: usize },
    #[error("non-finite update at step {step}: {quantity}")]
    NonFiniteUpdate { step: usize, quantity: String },
    #[error("server precision became non-positive at round {round} (coordinate {index}, value {value})")]
    NonPositiveServerPrecision { round: usize, index: usize, value: f64 },
    #[error("maximum iterations ({0}) exceeded")]
    MaxItersExceeded(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic number {found:#010x} at offset {offset} (expected {expected:#010x})")]
    BadMagic { offset: usize, expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("split leaves client {0} without examples")]
    EmptyClient(usize),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("reference solution did not converge (residual {residual:e} after {iters} iterations)")]
    ReferenceNotConverged { residual: f64, iters: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("i/o error: {0}")]
    Io(String),
}

fn context(s: &str) -> String {
    if s.is_empty() {
        String::new()
    } else {
        format!(" ({s})")
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error marks a divergent run (a reportable outcome) rather than a misuse.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonPositivePrecision(_)
                | Error::DegenerateMoment(_)
                | Error::ResultNotInFamily(_)
                | Error::PrecisionEscape { .. }
                | Error::NonFiniteUpdate { .. }
                | Error::NonPositiveServerPrecision { .. }
        )
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Error::NonPositivePrecision(_) => "non_positive_precision",
            Error::DegenerateMoment(_) => "degenerate_moment",
            Error::FamilyMismatch(_) => "family_mismatch",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidFamily(_) => "invalid_family",
            Error::EstimatorUnsupported { .. } => "estimator_unsupported",
            Error::ResultNotInFamily(_) => "result_not_in_family",
            Error::NotConjugate(_) => "not_conjugate",
            Error::PrecisionEscape { .. } => "precision_escape",
            Error::NonFiniteUpdate { .. } => "non_finite_update",
            Error::NonPositiveServerPrecision { .. } => "non_positive_server_precision",
            Error::MaxItersExceeded(_) => "max_iters_exceeded",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BadMagic { .. } => "bad_magic",
            Error::TruncatedFile(_) => "truncated_file",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::EmptyClient(_) => "empty_client",
            Error::SingularSystem(_) => "singular_system",
            Error::ReferenceNotConverged { .. } => "reference_not_converged",
            Error::InvalidData(_) => "invalid_data",
            Error::Io(_) => "io",
        }
    }
}

//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration problems,
//! input-data problems, audit verdicts, and convergence failures each map to a
//! distinct process exit code (see `Error::exit_code`).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument value is outside the documented domain (NaN, negative
    /// weight, empty sample set, prior outside (0,1), ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two objects that must share a shape (batch sizes, layer widths,
    /// point-cloud dimensions) disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Two densities that must live on the same support (identical grid or
    /// identical alphabet) do not.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    /// A gradient fed to the optimizer contains NaN or infinity.
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    /// The compression-rate certificate cannot certify at this (mu, epsilon):
    /// the measured mu is at or above the largest admissible value.
    #[error(
        "vacuous certificate: mu = {mu} but epsilon = {epsilon} admits only mu < {max_mu}"
    )]
    VacuousCertificate { mu: f64, epsilon: f64, max_mu: f64 },

    /// A required group label is absent from the data.
    #[error("missing group: {0}")]
    MissingGroup(String),

    /// An iterative procedure exhausted its budget without meeting its
    /// tolerance.
    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: String, residual: f64 },

    /// The audited outputs violate the requested epsilon.
    #[error(
        "audit failed: empirical sup log-odds {sup_log_odds} exceeds epsilon {epsilon}"
    )]
    AuditFailed { sup_log_odds: f64, epsilon: f64 },

    /// A config file is malformed or holds an unknown/invalid key.
    #[error("config error: {0}")]
    Config(String),

    /// An input data file is malformed. `line` is 1-based and counts the
    /// header, so the first data row is line 2; line 0 means the whole file.
    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error.
    ///
    /// 2 = config/usage, 3 = data, 4 = audit verdict, 5 = non-convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidInput(_)
            | Error::ShapeMismatch(_)
            | Error::SupportMismatch(_)
            | Error::NonFiniteGradient { .. } => 2,
            Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::MissingGroup(_) => 3,
            Error::AuditFailed { .. } | Error::VacuousCertificate { .. } => 4,
            Error::NonConvergence { .. } => 5,
        }
    }
}

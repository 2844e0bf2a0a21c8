use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined C-index: no comparable pairs")]
    UndefinedCIndex,

    #[error("duplicate patient id `{0}`")]
    DuplicateId(String),

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("malformed numeric value `{value}` in column `{column}` (row {row})")]
    MalformedNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("no features left after encoding")]
    EmptyFeatures,

    #[error("cohort has no observed events")]
    NoEvents,

    #[error("feature `{0}` is constant")]
    ConstantFeature(String),

    #[error("Newton iterations did not converge after {iterations} steps (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("monotone likelihood: coefficients diverge (|beta|_inf = {beta_norm:.3e}); refit with ridge > 0")]
    Separation { beta_norm: f64, trace: Vec<f64> },

    #[error("Hessian is singular; refit with ridge > 0")]
    SingularHessian,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize, trace: Vec<f64> },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("patient sets differ; missing ids: {}", .0.join(", "))]
    PatientMismatch(Vec<String>),

    #[error("risks are constant; z-score undefined (use rank or none)")]
    ConstantRisks,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse error class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Convergence,
    Evaluation,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Convergence => 4,
            ErrorClass::Evaluation => 5,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::NonConvergence { .. }
            | Error::Separation { .. }
            | Error::SingularHessian
            | Error::Divergence { .. } => ErrorClass::Convergence,
            Error::UndefinedCIndex | Error::PatientMismatch(_) | Error::ConstantRisks => {
                ErrorClass::Evaluation
            }
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

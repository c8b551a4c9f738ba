use thiserror::Error;

pub type Result<T> = std::result::Result<T, IdmrError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdmrError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("counts in row {row} sum to {sum} but the total is {total}")]
    TotalMismatch { row: usize, sum: u64, total: u64 },

    #[error("observation {row} has zero total count")]
    ZeroTotal { row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("exp(eta + mu) overflows at observation {row}, choice {choice}")]
    Overflow { row: usize, choice: usize },

    #[error("numerically singular Hessian{}", for_choice(*choice))]
    SingularHessian { choice: Option<usize> },

    #[error("choice{} has no positive counts; its coefficients are not identified", fmt_choice(*choice))]
    EmptyChoice { choice: Option<usize> },

    #[error("base row of the parameter matrix must be identically zero")]
    BaseRowNonZero,

    #[error("full MLE needs {params} free parameters, above the cap of {cap}; use the IDC estimator instead")]
    TooManyParameters { params: usize, cap: usize },

    #[error("contradictory constraints: {0}")]
    Contradictory(String),

    #[error("{failed} of {total} bootstrap replicates failed (first: {first})")]
    BootstrapFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("standard error is zero; the Wald statistic is undefined")]
    ZeroStandardError,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(String),
}

fn fmt_choice(choice: Option<usize>) -> String {
    choice.map(|k| format!(" {k}")).unwrap_or_default()
}

fn for_choice(choice: Option<usize>) -> String {
    choice
        .map(|k| format!(" for choice {k}"))
        .unwrap_or_default()
}

impl IdmrError {
    /// Attach a choice index to errors raised inside a per-choice solve.
    pub fn at_choice(self, k: usize) -> Self {
        match self {
            IdmrError::SingularHessian { choice: None } => {
                IdmrError::SingularHessian { choice: Some(k) }
            }
            IdmrError::EmptyChoice { choice: None } => IdmrError::EmptyChoice { choice: Some(k) },
            other => other,
        }
    }

    /// Errors caused by numerics rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IdmrError::NonFinite { .. }
                | IdmrError::Overflow { .. }
                | IdmrError::SingularHessian { .. }
                | IdmrError::EmptyChoice { .. }
                | IdmrError::BootstrapFailures { .. }
                | IdmrError::ZeroStandardError
                | IdmrError::TooManyParameters { .. }
        )
    }
}

impl From<std::io::Error> for IdmrError {
    fn from(e: std::io::Error) -> Self {
        IdmrError::Io(e.to_string())
    }
}

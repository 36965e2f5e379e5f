use thiserror::Error;

/// Process exit status: 0 success, 2 config, 3 strict stability, 4 numeric,
/// 5 dataset. Anything else (output I/O) exits with 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stability violation: {0}")]
    Stability(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("dataset error:\n  {}", .0.join("\n  "))]
    Dataset(Vec<String>),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stability(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Dataset(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

impl From<biooss::Error> for CliError {
    fn from(e: biooss::Error) -> Self {
        use biooss::Error as E;
        let msg = e.to_string();
        match e {
            E::Shape(_)
            | E::InvalidParameter(_)
            | E::Precondition(_)
            | E::Infeasible { .. }
            | E::Unsupported(_)
            | E::TooLarge { .. }
            | E::Capacity(_)
            | E::Domain { .. } => CliError::Config(msg),
            E::Unstable { .. } => CliError::Stability(msg),
            E::NonFinite { .. } | E::Diverged { .. } | E::Numeric(_) | E::Degenerate { .. } => CliError::Numeric(msg),
            E::Format(_) | E::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

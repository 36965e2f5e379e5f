use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {field} at step {step:?}")]
    NonFinite { step: Option<usize>, field: String },

    #[error("eigen-decomposition is degenerate at xi = ({xi_x}, {xi_y}); use the DC/dense branch")]
    Degenerate { xi_x: f64, xi_y: f64 },

    #[error("eigenvalue approximation requires a complex-conjugate pair (discriminant = {discriminant})")]
    Domain { discriminant: f64 },

    #[error("band [{f_lo}, {f_hi}] Hz is infeasible: the highest frequency reachable under the stability cap is {max_frequency} Hz")]
    Infeasible { f_lo: f64, f_hi: f64, max_frequency: f64 },

    #[error("stability violated in {count} cell(s); worst eigenvalue magnitude {worst}")]
    Unstable { count: usize, worst: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("grid too large: {cells} cells (limit {limit})")]
    TooLarge { cells: usize, limit: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded {threshold}")]
    Diverged { step: usize, loss: f64, threshold: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

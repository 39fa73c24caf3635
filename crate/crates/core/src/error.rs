use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    AsymmetricInput { asymmetry: f64 },

    #[error("vector length {len} is not valid here: {reason}")]
    BadLength { len: usize, reason: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} must be positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("G_uu block is singular or ill-conditioned (condition number {cond:.3e})")]
    SingularGuu { cond: f64 },

    #[error("R + Sigma(P) is not invertible (condition number {cond:.3e})")]
    SingularInner { cond: f64 },

    #[error("generalized Lyapunov operator is singular (condition number {cond:.3e})")]
    SingularOperator { cond: f64 },

    #[error("gain is not admissible (spectral abscissa {abscissa:.6e})")]
    NotAdmissible { abscissa: f64 },

    #[error("no convergence after {iterations} iterations (last step {last_step:.3e})")]
    NoConvergence { iterations: usize, last_step: f64 },

    #[error("Riccati oracle diverged: {reason}")]
    OracleDiverged { reason: String },

    #[error("simulation blew up at step {step} (t = {time:.6}, |v| = {norm:.3e})")]
    Blowup { step: usize, time: f64, norm: f64 },

    #[error("trajectory has {samples} samples, at least 2 are required")]
    TooFewSamples { samples: usize },

    #[error("policy-evaluation ODE diverged at s = {s:.4} (|P| = {norm:.3e})")]
    OdeUnstable { s: f64, norm: f64 },

    #[error("data-driven evaluation matrix is not Hurwitz (spectral abscissa {abscissa:.6e})")]
    NotHurwitz { abscissa: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
        Error::DimensionMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            got: format!("{}x{}", got.0, got.1),
        }
    }

    /// The innermost error, with any iteration wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}

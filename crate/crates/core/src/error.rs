use thiserror::Error;

pub type Result<T> = std::result::Result<T, EllError>;

#[derive(Debug, Error)]
pub enum EllError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("elliptical family mismatch: tau {0} vs {1}")]
    Family(f64, f64),

    #[error("Newton-Schulz diverged at iteration {iteration} (residual {residual:e})")]
    Convergence { iteration: usize, residual: f64 },

    #[error("singular scale matrix: {0}")]
    Singular(String),

    #[error("not differentiable: {0}")]
    NonDifferentiable(String),

    #[error("degenerate similarity: {0}")]
    DegenerateSimilarity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error("empty vocabulary: {0}")]
    EmptyVocabulary(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("power iteration did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("degenerate projection plane: {0}")]
    DegeneratePlane(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("unknown token `{0}`")]
    MissingToken(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EllError {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            EllError::Convergence { .. }
                | EllError::Singular(_)
                | EllError::NonDifferentiable(_)
                | EllError::NonFinite(_)
                | EllError::NoConvergence(_)
        )
    }
}

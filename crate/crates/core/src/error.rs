use thiserror::Error;

/// Errors raised by the inference engine and its front-ends.
#[derive(Debug, Error)]
pub enum GbpError {
    #[error("precision matrix is singular (unconstrained direction)")]
    SingularPrecision,
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("eliminated block is singular")]
    SingularBlock,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("factor `{factor}` is not adjacent to variable `{variable}`")]
    NotAdjacent { factor: String, variable: String },
    #[error("damping must lie in (0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("measurement function could not be evaluated: {0}")]
    EvaluationFailure(String),
    #[error("jacobian contains non-finite entries")]
    NonFiniteJacobian,
    #[error("range-bearing points coincide")]
    CoincidentPoints,
    #[error("no assignment for variable `{0}`")]
    MissingAssignment(String),
    #[error("graph has no factors or variables")]
    EmptyGraph,
    #[error("matrix has a zero diagonal entry at {0}")]
    ZeroDiagonal(usize),
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("graph is not a grid")]
    NotAGrid,
    #[error("invalid schedule policy: {0}")]
    InvalidPolicy(String),
    #[error("graph cannot be serialized: {0}")]
    NotSerializable(String),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GbpError> = std::result::Result<T, E>;

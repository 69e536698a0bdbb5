use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("interaction matrix is not symmetric at z = {z:?}: |V(-z) - V(z)^T| = {violation:e}")]
    NotSymmetric { z: Vec<i64>, violation: f64 },

    #[error("symbol is not non-negative at node {node} (theta = {theta:?}): eigenvalue {eigenvalue:e}")]
    NotPositive {
        node: usize,
        theta: Vec<f64>,
        eigenvalue: f64,
    },

    #[error("branch {branch} at node {node} has frequency {omega:e} below the floor; group velocity is undefined")]
    SingularBranch {
        node: usize,
        branch: usize,
        omega: f64,
    },

    #[error("symbol is singular at node {node} (theta = {theta:?}) but a finite inverse is required")]
    SingularSymbol { node: usize, theta: Vec<f64> },

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: String, found: String },

    #[error("{what}: imaginary residue {residue:e} exceeds tolerance (scale {scale:e})")]
    ImaginaryResidue {
        what: String,
        residue: f64,
        scale: f64,
    },

    #[error("density is not positive semi-definite at node {node}: eigenvalue {eigenvalue:e}")]
    NotPsd { node: usize, eigenvalue: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("window radius {radius} is too large for a grid of {points} points per axis")]
    WindowTooLarge { radius: usize, points: usize },

    #[error("test function rejected: {reason}")]
    TestFunctionRejected { reason: String },

    #[error("time {t} exceeds the torus horizon {horizon}")]
    HorizonExceeded { t: f64, horizon: f64 },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

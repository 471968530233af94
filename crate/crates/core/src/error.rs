use thiserror::Error;

use crate::expr::{EvalError, ParseError};
use crate::graph::TrapReport;
use crate::matrix::ViolationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Row and column are 1-based.
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("matrix must be square with n >= 1: {0}")]
    Shape(String),

    #[error("matrix is not compartmental: {0}")]
    NotCompartmental(ViolationReport),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("matrix is not outflow connected (trap {})", format_trap(.0))]
    NotOutflowConnected(TrapReport),

    #[error("vertex set is not a trap: {0}")]
    NotATrap(String),

    #[error("matrix is numerically singular (reciprocal condition {rcond:e}); run trap detection")]
    Singular { rcond: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),

    #[error("step underflow at t = {t}: component {component} (1-based) leaves the box at {value}")]
    StepUnderflow { t: f64, component: usize, value: f64 },

    #[error("non-finite state at t = {t} in component {component} (1-based)")]
    NonFiniteState { t: f64, component: usize },

    #[error("assumption {assumption} violated at component {component} (1-based): {detail}")]
    AssumptionViolated {
        assumption: &'static str,
        component: usize,
        detail: String,
    },

    #[error("tau too small for these bounds: {0}")]
    TauTooSmall(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_trap(report: &TrapReport) -> String {
    match &report.trap {
        Some(k) => {
            let one_based: Vec<String> = k.iter().map(|i| (i + 1).to_string()).collect();
            format!("{{{}}}", one_based.join(", "))
        }
        None => "none".to_string(),
    }
}

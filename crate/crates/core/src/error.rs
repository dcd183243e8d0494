use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mass matrix is degenerate (min eigenvalue {min_eigenvalue:e})")]
    DegenerateMassMatrix { min_eigenvalue: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("flow time {tau} outside [0, {period}] or off the substep grid")]
    InvalidFlowTime { tau: f64, period: f64 },

    #[error("disturbance exceeds its bound at t = {t}: |delta|_inf = {norm:e} > {bound:e}")]
    DisturbanceBound { t: f64, norm: f64, bound: f64 },

    #[error("free space exhausted on axis {axis}: lower {lower} >= upper {upper}")]
    InfeasibleBox { axis: usize, lower: f64, upper: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite Jacobian at node {node}")]
    NonFiniteJacobian { node: usize },

    #[error("QP solve failed: {0}")]
    QpFailure(String),

    #[error("simulation aborted at t = {t}: {reason}")]
    SimulationAborted { t: f64, reason: String },

    #[error("empty log")]
    EmptyLog,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("failed to parse scenario file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

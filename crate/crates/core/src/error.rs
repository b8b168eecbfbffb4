use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("critical orbit returns to 0 (|f^{n}(0)| below resolution)")]
    Superstable { n: usize },
    #[error("anchor search failed in cell p = {p}, j = {j} (check epsilon, N, anchor horizon)")]
    AnchorSearch { p: usize, j: usize },
    #[error("subdivision breakdown at time {time}: {reason}")]
    Breakdown { time: usize, reason: String },
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("fit rejected: R^2 = {r2:.4}")]
    FitRejected { r2: f64 },
    #[error("no two branches share a return time and target sign (increase T_max)")]
    NoCommonReturnTime,
    #[error("no connector interval found within {0} iterates")]
    ConnectorNotFound(usize),
    #[error("division guard: {0}")]
    DivisionGuard(String),
    #[error("point {0} lies in the tail set (no branch)")]
    NotInBase(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

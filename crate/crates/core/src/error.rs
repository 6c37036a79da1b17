use thiserror::Error;

/// Error type shared by all core modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("truncation error: grid does not hold the state (norm defect {defect:.3e})")]
    Truncation { defect: f64 },
    #[error("out of domain: {0}")]
    OutOfDomain(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid setup: {0}")]
    InvalidSetup(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("node proximity: density {density:.3e} below guard {guard:.3e}")]
    NodeProximity { density: f64, guard: f64 },
    #[error("node stall: trajectory pinned near a wavefunction node at t = {time}")]
    NodeStall { time: f64 },
    #[error("domain exit: trajectory left the grid region at t = {time}")]
    DomainExit { time: f64 },
    #[error("ensemble error: {0}")]
    Ensemble(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("incompatible binning: {0}")]
    IncompatibleBinning(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

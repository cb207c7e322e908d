use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid bath specification: {0}")]
    InvalidBath(String),
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),
    #[error("rotation requires a single bath coupled both ways, got layout {0:?}")]
    WrongLayout(crate::model::Layout),
    #[error("no exact diagonal mapping: {0}")]
    InconsistentRatios(String),
    #[error("spectral exponent s = {0} must lie in (0, 1)")]
    ExponentOutOfRange(f64),
    #[error("state dimensions {state:?} do not match model ({modes} modes)")]
    DimensionMismatch { state: (usize, usize), modes: usize },
    #[error("invalid variational state: {0}")]
    InvalidState(String),
    #[error("collapsed state: norm {0:e} below threshold")]
    CollapsedState(f64),
    #[error("Bloch vector length {0} exceeds 1")]
    BlochLength(f64),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("Fock space dimension {0} exceeds the cap of 1000000")]
    DimensionOverflow(usize),
    #[error("exact diagonalization supports 1 to 3 modes, got {0}")]
    TooManyModes(usize),
    #[error("truncation ladder did not settle: {0}")]
    TruncationNotConverged(String),
    #[error("coherent-state truncation tail {0:e} exceeds 1e-10")]
    TruncationTail(f64),
    #[error("eigensolver did not converge: {0}")]
    EigenNotConverged(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

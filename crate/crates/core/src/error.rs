use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("structure has {n_atoms} atoms, limit is {max_atoms}")]
    TooManyAtoms { n_atoms: usize, max_atoms: usize },
    #[error("structure has no atoms")]
    EmptyStructure,
    #[error("invalid structure: {0}")]
    InvalidStructure(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate cell: perpendicular width {0:e} along axis {1}")]
    DegenerateCell(f64, usize),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("input is empty")]
    EmptyInput,
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("test-split labels read before final evaluation")]
    TestLeak,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

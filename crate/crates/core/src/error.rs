use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown element symbol `{symbol}`")]
    UnknownElement { line: usize, symbol: String },

    #[error("line {line}: odd electron count {electrons} (closed-shell only)")]
    OddElectronCount { line: usize, electrons: i64 },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("geometry perturbation failed after {0} attempts")]
    PerturbationRetries(usize),

    #[error("basis set: {0}")]
    Basis(String),

    #[error("overlap matrix is linearly dependent (smallest eigenvalue {min_eigenvalue:.3e})")]
    LinearDependence { min_eigenvalue: f64 },

    #[error("two-electron tensor needs {required_bytes} bytes, cap is {cap_bytes}")]
    MemoryCap { required_bytes: u64, cap_bytes: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("eigensolver: {0}")]
    Eigen(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("no atomic density for Z = {0}")]
    MissingAtomicDensity(u32),

    #[error("atomic SCF for Z = {0} did not converge")]
    AtomicScf(u32),

    #[error("non-finite gradient produced by tape operation #{op_index} ({op})")]
    NonFiniteGradient { op_index: usize, op: &'static str },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NanLoss { epoch: usize, sample: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("reference SCF for `{0}` did not converge")]
    NotConverged(String),

    #[error("label metadata mismatch: expected {expected}, found {found}")]
    LabelMismatch { expected: String, found: String },

    #[error("cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

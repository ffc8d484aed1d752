use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("factorization of a {dim}x{dim} matrix failed at every jitter level (last tried {last_jitter:e})")]
    FactorizationFailure { dim: usize, last_jitter: f64 },

    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {0} has (near) zero norm and cannot be normalized")]
    ZeroRow(usize),

    #[error("quadrature order {0} outside the supported range [1, 100]")]
    InvalidQuadratureOrder(usize),

    #[error("node training labels contain a single class; the tree split is malformed")]
    SingleClassNode,

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("natural-gradient step left -2H without positive definiteness; reduce the learning rate")]
    PdViolation,

    #[error("class {0} is not covered by the label tree")]
    UnknownClass(usize),

    #[error("class {0} was already introduced in an earlier session")]
    ClassCollision(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: usize, n_classes: usize },

    #[error("artifact format version {found} is not supported by this build (expects {expected}); re-export the model with a matching version")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("session plan needs {needed} classes but only {available} are available")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("class {class} has {available} training samples, {needed} shots requested")]
    InsufficientShots { class: usize, available: usize, needed: usize },

    #[error("model is not fitted: {0}")]
    NotFitted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::FactorizationFailure { .. }
            | Error::NotSymmetric(_)
            | Error::PdViolation
            | Error::SingleClassNode => ErrorKind::Numerical,
            Error::InvalidConfig(_)
            | Error::InvalidQuadratureOrder(_)
            | Error::InsufficientClasses { .. }
            | Error::InsufficientShots { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

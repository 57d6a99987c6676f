use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} absent from labels")]
    MissingClass { class: usize },

    #[error("dirichlet partition failed after {attempts} draws: client {client} left empty")]
    PartitionExhausted { attempts: usize, client: usize },

    #[error("weights are not on the simplex: {0}")]
    NotOnSimplex(String),

    #[error("theorem premise violated: {0}")]
    PremiseViolated(String),

    #[error("unknown {kind} strategy `{name}` (registered: {registered})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        registered: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("seed {seed} diverged at round {round}: {what} became non-finite")]
    Diverged {
        seed: u64,
        round: usize,
        what: &'static str,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("unknown market `{0}`")]
    UnknownMarket(String),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("user {user} has {count} interaction(s); at least 2 are needed for a holdout")]
    TooFewInteractions { user: u64, count: usize },

    #[error("user {user} has only {available} candidate items, {requested} requested")]
    InsufficientCandidates {
        user: u64,
        available: usize,
        requested: usize,
    },

    #[error("user {user} appears in markets `{first}` and `{second}`")]
    UserInMultipleMarkets {
        user: u64,
        first: String,
        second: String,
    },

    #[error("graph has no usable edges: {0}")]
    DegenerateGraph(&'static str),

    #[error("KL support violation at row {row}, column {col}")]
    SupportViolation { row: usize, col: usize },

    #[error("duplicate candidate item {0}")]
    DuplicateCandidate(usize),

    #[error("missing pretrained {0} branch")]
    MissingPretrained(&'static str),

    #[error("empty training set")]
    EmptyTrainSet,
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(left: impl core::fmt::Display, right: impl core::fmt::Display) -> Self {
        use alloc::string::ToString;
        Error::Shape {
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

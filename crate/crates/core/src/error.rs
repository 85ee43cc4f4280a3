use thiserror::Error;

pub type Result<T, E = SeeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SeeError {
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("duplicate object name `{0}` in superclass table")]
    DuplicateObject(String),

    #[error("superclass `{0}` has no objects")]
    EmptySuperclass(String),

    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),

    #[error("invalid attribute vocabulary: {0}")]
    InvalidVocabulary(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "edit distance is undefined across objects (`{left}` vs `{right}`); use embedding similarity instead"
    )]
    CrossObjectDistance { left: String, right: String },

    #[error("bin edges must be strictly increasing with at least two entries")]
    InvalidBinEdges,

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("generation failed for prompt `{prompt_id}` seed {seed}: {message}")]
    Generation {
        prompt_id: String,
        seed: u64,
        message: String,
    },

    #[error("erasure adapter `{cet}` failed at step {step}: {message}")]
    Erasure {
        cet: String,
        step: usize,
        message: String,
    },

    #[error("no adapter registered for `{name}` (registered: {})", registered.join(", "))]
    UnknownAdapter {
        name: String,
        registered: Vec<String>,
    },

    #[error("verifier `{verifier}` failed on {image}: {message}")]
    Verifier {
        verifier: String,
        image: String,
        message: String,
    },

    #[error("embedding backend failed for `{phrase}`: {message}")]
    Embedding { phrase: String, message: String },

    #[error("adapter transport: {0}")]
    Transport(String),

    #[error("attention grid has no positive mass")]
    DegenerateGrid,

    #[error("invalid attention grid: {0}")]
    InvalidGrid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SeeError {
    /// Backend failures that a scheduler may retry.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            SeeError::Generation { .. } | SeeError::Verifier { .. } | SeeError::Transport(_)
        )
    }
}

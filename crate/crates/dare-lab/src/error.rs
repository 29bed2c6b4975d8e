use thiserror::Error;

/// Errors produced by the lab's modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range; names the offending key.
    #[error("configuration error: key `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// A hint trajectory is too short to supply the forced prefix.
    #[error("hint format error: hint has {hint_len} tokens, forced prefix needs {forced}")]
    HintFormat { hint_len: usize, forced: usize },

    /// A prompt id is not part of the world the buffer was built for.
    #[error("unknown prompt id {0}")]
    UnknownPrompt(usize),

    /// Importance weights sum to zero; caller should fall back to the cold start.
    #[error("degenerate importance weights (zero sum over {0} entries)")]
    DegenerateWeights(usize),

    /// Stored or supplied data violates a structural contract.
    #[error("data error: {0}")]
    Data(String),

    /// The finite-sample bound's precondition epsilon_delta < b_min fails.
    #[error("bound inapplicable: epsilon_delta {epsilon_delta} >= b_min {b_min}")]
    BoundInapplicable { epsilon_delta: f64, b_min: f64 },

    /// A snapshot file failed validation.
    #[error("integrity error in {path} at byte {offset}: {msg}")]
    Integrity {
        path: String,
        offset: usize,
        msg: String,
    },

    /// A rollout group is too small to standardize.
    #[error("grouping error: {0}")]
    Grouping(String),

    /// Batch selection could not proceed.
    #[error("selection error: {0}")]
    Selection(String),

    /// A metric's precondition fails.
    #[error("metric error: {0}")]
    Metric(String),

    /// The surrogate objective became non-finite.
    #[error("numerical error: non-finite loss in group for prompt {prompt_id} at step {step}")]
    NonFiniteLoss { prompt_id: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

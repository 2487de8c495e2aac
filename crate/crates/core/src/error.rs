use thiserror::Error;

use crate::mdp::TokenId;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value produced by a pluggable component broke a required invariant.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },

    #[error("no token has finite probability")]
    NoValidToken,

    #[error("enumeration of {needed} trajectories exceeds the cap of {cap}")]
    TooLarge { needed: u128, cap: u128 },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Toml(e.to_string())
    }
}

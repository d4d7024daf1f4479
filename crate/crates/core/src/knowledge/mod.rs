//! Chemist-knowledge text: frozen embedding providers, the on-disk embedding
//! container, batch padding, and an optional chat client for generating text.

mod chat;
mod container;
mod embed;

pub use chat::{
    ChatClient, ChatConfig, ChatTransport, Generated, HttpTransport, ENV_API_BASE, ENV_API_KEY,
    ENV_MODEL,
};
pub use container::{
    load_embeddings, save_embeddings, EmbeddingStore, IndexEntry, DATA_FILE, INDEX_FILE,
};
pub use embed::{
    builtin_embed, pad_batch, text_hash, tokenize, BuiltinProvider, EmbeddingProvider,
    KnowledgeEmbedding, MAX_TOKENS,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge text is empty")]
    EmptyText,
    #[error("knowledge text contains no tokens")]
    NoTokens,
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding width mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("entry `{id}`: {msg}")]
    Shape { id: String, msg: String },
    #[error("entry `{id}`: checksum mismatch or truncated data")]
    Checksum { id: String },
    #[error("entry `{id}`: non-finite value")]
    NonFinite { id: String },
    #[error("no embedding for molecule `{0}`")]
    MissingId(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("chat request failed after {attempts} attempts: {message}")]
    Http { attempts: u32, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

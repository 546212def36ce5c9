//! Cross-modal image/text retrieval trained with similarity-based noise
//! elimination, keyword masked reasoning and an offline reversed-retrieval
//! reranker.

pub mod alignment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rerank;
pub mod trainer;

pub use error::{Error, Result};

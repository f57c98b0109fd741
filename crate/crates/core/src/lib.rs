pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod fusion;
pub mod nn;
pub mod reranker;
pub mod retriever;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, Result};

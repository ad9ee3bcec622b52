//! Charge classification by knowledge-injected prompt learning.
//!
//! The pipeline retrieves statutes for a case through a contrastively trained
//! joint embedding space, extracts factual elements through a conversational
//! LLM contract (mocked deterministically for tests), matches legal keywords
//! against a lexicon, fuses everything into a masked-LM prompt with trainable
//! soft tokens, and maps mask predictions to a charge label by Jaccard
//! similarity against the verbalizer texts.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod labels;
pub mod llm;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

//! Two-stage sequential recommendation.
//!
//! A linear-recurrence retriever scores every catalog item from a user's
//! interaction history and keeps the top candidates. A small causal language
//! model then reads an instruction prompt built from item titles, and the
//! next-token logits of the candidates' index letters become their ranking
//! scores, all from a single forward pass.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod ingest;
pub mod lm;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod ranker;
pub mod retriever;
pub mod tensor;

pub use error::{Error, Result};

//! Attribute-aware multimodal entity linking for product reviews.
//!
//! The pipeline links a product mention in a review to an entity of a
//! product knowledge base. Candidates are retrieved by fusing text, cross
//! and image similarity, then disambiguated by an attribute-entailment head
//! combined with an adapted image similarity.

pub mod corpus;
pub mod disambig;
pub mod encoders;
pub mod error;
pub mod evalbench;
pub mod jsonl;
pub mod linalg;
pub mod mining;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod textnorm;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

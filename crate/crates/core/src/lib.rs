//! Dual-encoder dense retrieval with iterative hard-negative mining.
//!
//! The pipeline: a synthetic or loaded [`corpus`], BM25 in [`sparse`], a
//! hashed bag-of-tokens [`encoder`], exact and IVF search in
//! [`dense_index`], negative pools in [`mining`], the episode loop in
//! [`trainer`] and per-episode analysis in [`diagnostics`].

pub mod corpus;
pub mod dense_index;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod mining;
pub mod sparse;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

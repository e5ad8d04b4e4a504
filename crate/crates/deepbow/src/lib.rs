//! Sparse bag-of-words relevance at desk scale.
//!
//! A query and a product title are independently encoded into sparse
//! bag-of-words representations over a shared word index: the query side
//! distributes attention-derived weights over its own terms, while the
//! product side expands into the full index through a gated sigmoid head so
//! that it can surface synonyms that never appear in the title. Relevance is
//! then a sorted intersection dot product between the two sparse vectors,
//! cheap enough to run over precomputed product stores at query time and
//! transparent enough to explain term by term.
//!
//! The crate covers the full loop: vocabulary construction ([`vocab`]),
//! the transformer encoder and its tape-based gradients ([`encoder`],
//! [`autodiff`]), representation heads ([`bow`]), scoring and explanations
//! ([`scoring`]), training ([`training`]), offline evaluation ([`eval`]),
//! binary stores and checkpoints ([`store`], [`model`]), and a small
//! line-oriented TCP service ([`serve`]).

pub mod autodiff;
pub mod bow;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod params;
pub mod scoring;
pub mod serve;
pub mod store;
pub mod synth;
pub mod training;
pub mod vocab;

pub use error::DeepBowError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, DeepBowError>;

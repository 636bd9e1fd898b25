//! Neural sequence labeling with word embeddings, character-level word
//! composition, and attention gating between the two.

pub mod autodiff;
pub mod chars;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod layers;
pub mod output;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

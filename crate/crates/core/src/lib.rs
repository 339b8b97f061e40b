//! Dimensionality-driven augmentation search.

pub mod augment;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod lid;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor};

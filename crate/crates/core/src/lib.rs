//! Meta-learned loss weighting for long-tailed multi-label classification.
//!
//! A classifier is trained on per-class binary cross-entropy whose entries
//! are reweighted by a small weight net. The weight net itself is updated so
//! that one step of the weighted training makes the classifier better on a
//! class-balanced meta-validation loss.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};

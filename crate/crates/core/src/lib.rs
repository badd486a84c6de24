//! Visually-grounded semantic class embeddings.
//!
//! Patches of seen-class images are clustered by a small set of heads trained
//! on frozen features; averaging cluster assignments per image and per class
//! yields a semantic embedding for every seen class. Unseen-class embeddings
//! are predicted from seen ones through class relations measured in an
//! external knowledge space, and the resulting table is scored with a
//! bilinear zero-shot classifier.

pub mod class_relation;
pub mod container;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod linalg;
pub mod manifest;
pub mod neighbors;
pub mod patchgen;
pub mod pc_trainer;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod zsl_eval;

pub use error::{Error, Result};

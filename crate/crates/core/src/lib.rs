//! Training-data reconstruction from homogeneous MLP classifiers trained on
//! embedding vectors.
//!
//! The pipeline trains a victim classifier ([`trainer`]), reconstructs
//! candidate training embeddings from its weights ([`reconstruction`]),
//! identifies good candidates with ground truth ([`evaluation`]) or without it
//! ([`clustering`]), and maps embeddings back to inputs through a frozen toy
//! feature extractor ([`backbone`]).

pub mod error;
pub mod linalg;
pub mod rng;

pub mod backbone;
pub mod clustering;
pub mod data;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod nnls;
pub mod reconstruction;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ActivationMode, Arch, MlpParams};

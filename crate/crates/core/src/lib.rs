//! Spoof-aware speaker verification backend.
//!
//! A small three-class classifier over concatenated enrollment/test speaker
//! embeddings (target / non-target / spoof), trained with optional auxiliary
//! spoof-embedding regression and attribute classification, adapted to the
//! spoofing domain by selective fine-tuning, and scored with a log-likelihood
//! ratio evaluated through three equal-error rates.

pub mod check;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod scoring;
pub mod seed;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::BnMode;
pub use model::{Group, GroupSet, Model, ModelConfig, Variant};
pub use tensor::Matrix;

//! Embedding and metadata files, trial protocols, batching and synthetic data.

pub mod batching;
pub mod embeddings;
pub mod metadata;
pub mod synth;
pub mod trials;

pub use batching::{Batch, Dataset, RegTarget, TargetSources, TargetSpec};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingStore};
pub use metadata::{read_metadata, write_metadata, AttributeKind, Metadata, UtteranceRecord};
pub use synth::{synth_generate, SynthConfig, SynthData};
pub use trials::{generate_trials, read_trials, write_trials, TrialLabel, TrialOptions, TrialPair};

//! Spoken language identification toolkit built around TDNN x-vector embeddings.
//!
//! The pipeline runs end to end on WAV corpora: ingestion and voice-activity
//! trimming ([`audio`]), log-mel / MFCC feature extraction ([`features`]),
//! offline data augmentation ([`augment`]), manifest handling and batching
//! ([`dataset`]), a small reverse-mode autodiff engine ([`autodiff`]), the
//! baseline and funnel-shaped TDNN model families ([`model`]), and training,
//! grid search, evaluation and ablation harnesses ([`training`]).
//!
//! [`synth`] generates small synthetic corpora so the whole pipeline can be
//! exercised deterministically without any external data.

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod features;
pub mod model;
pub mod synth;
pub mod training;
pub(crate) mod util;

pub use audio::AudioClip;
pub use features::{FeatureConfig, FeatureKind, FeatureMatrix};
pub use model::{LayerKind, LayerSpec, ModelConfig};

/// Canonical internal sample rate; every clip is resampled to this on ingestion.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

//! Quality-guided pseudo-label curation for unsupervised video instance
//! segmentation.
//!
//! The crate covers everything around the neural networks of a
//! self-training loop: mask primitives and RLE, the training-dataset model
//! and its JSON format, quality scoring, confidence filtering and
//! spatiotemporal NMS, adaptive fusion of curated labels across rounds,
//! training-batch sampling and DropLoss gating, a class-agnostic AP/AR
//! evaluator, and a seeded simulator that drives the whole loop against
//! hidden ground truth.
//!
//! Per-video work runs on rayon when the `parallel` feature (on by default)
//! is enabled; results are identical either way.

pub mod curation;
pub mod dataset;
pub mod eval;
pub mod exec;
pub mod fusion;
pub mod io;
pub mod mask;
pub mod scoring;
pub mod seed;
pub mod sim;
pub mod train;

pub use curation::{curate_video, CurationConfig};
pub use dataset::{
    load_dataset, save_dataset, validate_dataset, Annotation, Detection, DetectionId, RawDetection,
    SourceTag, TrainingDataset, VideoId, VideoMeta,
};
pub use eval::{evaluate, EvalReport};
pub use exec::Execution;
pub use fusion::{merge_dataset, FusionConfig};
pub use mask::{BitMask, Rle, SoftMask};
pub use scoring::{NoisyOracleScorer, OracleScorer, QualityScorer};
pub use sim::{run_self_training, SimConfig, Simulation};

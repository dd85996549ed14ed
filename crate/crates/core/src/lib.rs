//! Ambiguity-restrained representation learning for partially relevant video
//! retrieval: a from-scratch dual-branch text/video encoder, uncertainty-based
//! ambiguous pair detection, multi-positive contrastive and triplet objectives,
//! and recall@K evaluation on synthetic corpora with planted ambiguity.

pub mod ambiguity;
pub mod batch;
mod binio;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod similarity;
pub mod trainer;

pub use ambiguity::{
    compute_thresholds, compute_uncertainty, detect, AmbiguitySets, Thresholds, UncertaintyTables,
};
pub use batch::{Batch, BatchScores};
pub use config::RunConfig;
pub use corpus::{generate_synthetic, CorpusSpec, FeatureCorpus, Split};
pub use encoder::{EncoderDims, EncoderParams, GradientTape};
pub use error::{ArlError, Result};
pub use eval::{audit, evaluate, AuditReport, RecallReport};
pub use losses::{LossBreakdown, LossConfig};
pub use similarity::{build_corpus_map, CorpusSimilarityMap};
pub use trainer::{checkpoint, resume, train, DualBranchState, TrainConfig};

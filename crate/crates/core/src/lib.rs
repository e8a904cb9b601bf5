//! Shape-routed residual adapters for open-vocabulary region classification.
//!
//! A bank of bottleneck adapters sits between a frozen image encoder's
//! region features and the class text embeddings. Each region is routed to
//! exactly one adapter by the bin its aspect ratio falls in, so every adapter
//! only has to correct the distortion typical of one family of shapes.
//!
//! Modules:
//! - [`geometry`]: boxes, aspect ratios, IoU
//! - [`roi`]: RoIAlign feature extraction
//! - [`adapter`]: the adapter bank and its routing
//! - [`classifier`]: text-embedding classification and score fusion
//! - [`trainer`]: gradients and the optimization loop
//! - [`eval`]: accuracy breakdowns and AP50
//! - [`data`], [`synth`]: dataset containers and synthetic tasks

pub mod adapter;
pub mod classifier;
mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod roi;
pub mod synth;
pub mod trainer;

pub use adapter::{allocate, select_adapted, Adapter, AdapterBank, AllocationWeights, BankConfig, BinPartition, Feature};
pub use classifier::{
    classification_score, classify, fuse_scores, score_proposal, ClassifierConfig, ScoredDetection, Split,
    TextEmbeddingBank,
};
pub use data::{split_train_eval, Dataset, RegionSample};
pub use error::{Error, ErrorCategory, Result};
pub use eval::{accuracy_report, ap50, EvalReport};
pub use geometry::{aspect_ratio, iou, BoundingBox, RegionProposal};
pub use roi::{extract_region_feature, pool_region_feature, roi_align, FeatureMap, RoiConfig};
pub use synth::{DeformationKind, SynthConfig, SyntheticTask};
pub use trainer::{ce_loss, loss_and_gradients, train, Example, TrainConfig, TrainReport};

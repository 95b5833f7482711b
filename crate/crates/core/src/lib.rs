//! Region annotation engine: proposal merging, open-vocabulary tagging,
//! mask-aware matching, human verification and the iterative
//! data-human-model loop, backed by an append-only region store.

pub mod analytics;
pub mod config;
pub mod demo;
pub mod error;
pub mod gateway;
pub mod geometry;
pub mod iteration;
pub mod matching;
pub mod merge;
pub mod pipeline;
pub mod region;
pub mod store;
pub mod verify;
pub mod workspace;

pub use config::{AnnotatorSet, Config, TokenGrant};
pub use error::{Error, Result};
pub use geometry::{iou, scale_bucket, BoundingBox, MaskStats, ScaleBucket};
pub use merge::{merge_regions, DEFAULT_T_IOU};
pub use pipeline::{ImageRecord, Pipeline, PipelineParams};
pub use region::{
    ProposalSource, QaPair, QaStatus, Region, RegionSet, SemanticTag, TagSource, Verification, VerificationStatus,
};
pub use store::{ConceptIndex, Store};

//! Adaptive Semantic Aggregation (ASA) for UAV / satellite cross-view
//! geo-localization: a ViT backbone, part partitioning by 1-D k-means over
//! patch semantics, per-part heads with CE and triplet losses, training,
//! and Recall@K / AP retrieval evaluation.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asa;
pub mod attention_export;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod training;

pub use asa::{asa_forward, AttentionGrad, PartFeatures, PartitionSpec, Strategy};
pub use backbone::{Backbone, BackboneConfig, TokenSet};
pub use checkpoint::{Checkpoint, Tensor};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use heads::{HeadBank, HeadConfig, HeadOutputs};
pub use model::{GeoModel, ModelConfig};
pub use retrieval::{Direction, RetrievalReport};
pub use training::{lr_at, TrainConfig, Trainer};

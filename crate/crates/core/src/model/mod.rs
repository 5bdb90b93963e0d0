//! The miniature detection transformer.
//!
//! A stride-2 CNN backbone feeds a flattened feature map, plus a fixed 2-D
//! sinusoidal encoding, into a post-norm transformer encoder/decoder driven by
//! learned object queries. Shared linear heads decode every query slot into
//! class logits and a sigmoid-squashed `(cx, cy, w, h)` box.

pub mod checkpoint;
mod config;
mod encoding;
mod forward;
mod init;
mod params;

pub use config::ModelConfig;
pub use encoding::positional_encoding;
pub use forward::{
    attention_weights, forward, forward_graph, predict, BoundParams, NormStats, PredictionRow, Predictions,
};
pub use init::{batch_norm_layers, init_params};
pub use params::{in_backbone, partition_params, ParamEntry, ParamTree, ParamView, Partition, BACKBONE_PREFIX};

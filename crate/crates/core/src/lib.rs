//! Confidence-aware token pruning for ViT encoders.
//!
//! Between encoder stages every active patch token is scored by a small
//! linear head. Tokens the head is confident about (very low or very high
//! score) leave the sequence; each pruned group is summarized by one
//! prototype token that rides along into the next stage. After the last
//! stage, features from deeper stages are refilled into the dense maps of
//! shallower ones to form an aligned pyramid that a light decoder turns
//! into a prediction map.
//!
//! Module map:
//!
//! * [`numerics`]: matrices, activations, SplitMix64 RNG
//! * [`encoder`]: patch embedding, token sequences, transformer layers
//! * [`pruning`]: scoring, partitioning, masks, gathering
//! * [`compensation`]: prototype aggregation and sequence rebuild
//! * [`refill`]: dense snapshots, pyramid refill, decoder, heatmaps
//! * [`cost`]: analytic operation counts and threshold sweeps
//! * [`pipeline`]: the end-to-end forward pass
//! * [`config`], [`weights`], [`image`], [`model`], [`harness`]: I/O and commands

pub mod compensation;
pub mod config;
pub mod cost;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod image;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod pruning;
pub mod refill;
pub mod weights;

pub use compensation::CompensationMode;
pub use config::{parse_config, RunConfig};
pub use encoder::{EncoderConfig, IndexMap, Origin, TokenSequence};
pub use error::{Error, Result};
pub use image::Image;
pub use model::CatpModel;
pub use numerics::{Matrix, Rng};
pub use pipeline::{forward, ForwardState, PipelineOutput};
pub use pruning::{PruneThresholds, ScoringHead, StageRecord};

//! Vessel-pattern codebook distillation for 3D tubular segmentation.
//!
//! A teacher encoder-decoder learns a vector-quantized codebook of vessel
//! patterns from unlabeled volumes, is fine-tuned on a few labeled ones,
//! and then supervises a small student UNet through pseudo-labels and
//! codebook-matched bottleneck features.

pub mod codebook;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod tiling;
pub mod volume;

pub use error::{Error, Result};
pub use tiling::{plan, stitch, tile, TileIndex};
pub use volume::{
    percentile_clip_normalize, read_volume, write_volume, Volume, VolumeKind, Voxels,
};

//! Non-network machinery for joint cell segmentation and tracking with
//! learned pixel offsets and clustering bandwidths.
//!
//! The crate is organised bottom-up:
//!
//! * [`fields`] and [`geometry`]: prediction containers, the normalized
//!   coordinate grid, the Gaussian kernel and medoids.
//! * [`losses`]: training losses with analytic gradients.
//! * [`clustering`]: seeded bandwidth clustering of one frame.
//! * [`linker`]: backward-in-time linking into a lineage graph.
//! * [`metrics`]: SEG, DET/TRA (AOGM) and the motility overlap statistic.
//! * [`oracle`]: synthetic sequences and ideal prediction tensors.
//! * [`pipeline`]: normalization, tiling, test-time augmentation,
//!   stitching, file formats and the batch driver.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod clustering;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod linker;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
pub use fields::{
    BandwidthField, LabelImage, NormalizedPoint, PredictionSet, ScalarField, SegPrediction,
    VectorField,
};

/// Scaling weight applied to raw bandwidths before they enter the kernel.
pub const DEFAULT_BANDWIDTH_SCALE: f64 = -10.0;

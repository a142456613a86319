//! Spatiotemporal image-to-LiDAR contrastive pretraining at desk scale.
//!
//! The crate covers the whole pipeline on synthetic data: a deterministic
//! street-scene simulator producing calibrated LiDAR/camera sequences,
//! view-consistent semantic superpixels and their superpoints, a toy point
//! encoder with projection heads, the dense-to-sparse, spatial and temporal
//! contrastive objectives with analytic gradients, an AdamW/one-cycle
//! pretraining loop and a linear-probe evaluator.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod superpix;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;

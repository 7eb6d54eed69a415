//! Semi-supervised volumetric segmentation toolkit.
//!
//! The pipeline windows raw scans, slices them along all three axes, trains a
//! per-pixel segmenter on the labeled slices, pseudo-labels a few unlabeled
//! scans, then continues training with Fourier amplitude mixing between
//! labeled and unlabeled slices plus thresholded consistency on unlabeled
//! views. Predictions are scored with Dice, IoU and a normalized L1
//! Hausdorff distance.

pub mod error;
pub mod fourier;
pub mod metrics;
pub mod overlay;
pub mod pipeline;
pub mod preprocess;
pub mod segmenter;
pub mod ssl;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};

/// Independent child seed for a named sub-task.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Trainable per-pixel segmenters.
//!
//! [`Segmenter`] is the contract the training stages rely on: a forward pass
//! producing foreground probabilities and an exact gradient of a weighted
//! binary cross-entropy. [`PatchMlp`] is the reference implementation.

mod checkpoint;
mod mlp;
mod optim;
mod perturb;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use mlp::{ModelShape, PatchMlp};
pub use optim::{adamw_step, poly_lr, AdamWConfig, OptimizerState, TrainSchedule, DEFAULT_LR, POLY_POWER};
pub use perturb::{alpha_dropout, AlphaDropout, SELU_ALPHA, SELU_LAMBDA};

use crate::error::{Error, Result};
use crate::preprocess::{MaskSlice, Slice2D};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Seeded self-normalizing dropout on the first hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub rate: f64,
    pub seed: u64,
}

/// One slice worth of weighted per-pixel targets.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a Slice2D,
    /// Target foreground probability per pixel.
    pub targets: &'a [f32],
    /// Loss weight per pixel; pixels with weight 0 are skipped.
    pub weights: &'a [f64],
    pub perturb: Option<Perturbation>,
}

pub trait Segmenter {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Foreground probability per pixel, row-major.
    fn predict_probs(&self, slice: &Slice2D) -> Result<Vec<f64>>;

    fn predict_probs_perturbed(&self, slice: &Slice2D, perturb: Option<Perturbation>) -> Result<Vec<f64>>;

    /// Adds the gradient of `sum_i w_i * bce(p_i, y_i)` to `grad` and returns
    /// the weighted loss.
    fn accumulate_gradient(&self, example: &Example<'_>, grad: &mut [f64]) -> Result<f64>;
}

pub fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}[{i}] = {} is not finite", values[i])));
    }
    Ok(())
}

#[inline]
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy between probabilities and targets.
pub fn bce(probs: &[f64], targets: &[f32]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Input(format!(
            "{} probabilities vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let sum: f64 = probs.iter().zip(targets).map(|(&p, &y)| bce_term(p, y as f64)).sum();
    Ok(sum / probs.len() as f64)
}

pub fn mask_targets(mask: &MaskSlice) -> Vec<f32> {
    mask.data.iter().map(|&v| v as f32).collect()
}

/// Mean BCE of the model on one labeled slice, with its parameter gradient.
pub fn supervised_loss<S: Segmenter + ?Sized>(
    model: &S,
    slice: &Slice2D,
    target: &MaskSlice,
) -> Result<(f64, Vec<f64>)> {
    if (slice.height, slice.width) != (target.height, target.width) {
        return Err(Error::Input("slice and mask shapes differ".into()));
    }
    let targets = mask_targets(target);
    let weights = vec![1.0 / slice.len() as f64; slice.len()];
    let mut grad = vec![0.0; model.params().len()];
    let loss = model.accumulate_gradient(
        &Example {
            input: slice,
            targets: &targets,
            weights: &weights,
            perturb: None,
        },
        &mut grad,
    )?;
    Ok((loss, grad))
}

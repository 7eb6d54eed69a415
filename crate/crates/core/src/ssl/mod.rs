//! Two-stage semi-supervised training.
//!
//! Stage 1 fits the segmenter on labeled slices and pseudo-labels a seeded
//! sample of unlabeled scans. Stage 2 trains on the enlarged labeled set
//! with Fourier amplitude mixing against unlabeled slices, and adds a
//! consistency loss on unlabeled views gated by a self-adaptive confidence
//! threshold.

mod train;

pub use train::{
    generate_pseudo_labels, predict_volume, run_stage1, run_stage2, segment_volume, train_supervised, HistoryRow,
    LabeledVolume, PseudoVolume, Stage1Output, Stage2Output, StageConfig, TrainSlice, UnlabeledVolume,
    ValidationSet, HISTORY_HEADER,
};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{MaskSlice, Slice2D};
use crate::segmenter::{alpha_dropout, bce_term, Segmenter};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Global confidence threshold tracked as an exponential moving average of
/// the mean max-class confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdState {
    pub tau: f64,
    pub momentum: f64,
}

impl ThresholdState {
    pub const FLOOR: f64 = 1.0 / NUM_CLASSES as f64;

    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("threshold momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            tau: Self::FLOOR,
            momentum,
        })
    }
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self {
            tau: Self::FLOOR,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// `tau <- m tau + (1 - m) mean(confidences)`, clamped to `[1/C, 1]`. An empty
/// batch leaves the state unchanged.
pub fn update_threshold(state: ThresholdState, confidences: &[f64]) -> Result<ThresholdState> {
    if confidences.is_empty() {
        return Ok(state);
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Input(format!("confidence {c} outside [0, 1]")));
    }
    let mean = confidences.iter().sum::<f64>() / confidences.len() as f64;
    let tau = state.momentum * state.tau + (1.0 - state.momentum) * mean;
    Ok(ThresholdState {
        tau: tau.clamp(ThresholdState::FLOOR, 1.0),
        ..state
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Stage1,
    Stage2,
}

/// A model-labeled unlabeled slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub slice: Slice2D,
    pub mask: MaskSlice,
    /// Max-class probability per pixel.
    pub confidence: Vec<f32>,
    pub provenance: Provenance,
}

/// Foreground wins only when strictly more likely than background.
#[inline]
pub fn hard_label(p: f64) -> u8 {
    (p > 0.5) as u8
}

#[inline]
pub fn max_class_confidence(p: f64) -> f64 {
    p.max(1.0 - p)
}

pub fn pseudo_label(probs: &[f64]) -> (Vec<u8>, Vec<f32>) {
    probs
        .iter()
        .map(|&p| (hard_label(p), max_class_confidence(p) as f32))
        .unzip()
}

pub fn pseudo_label_slice<S: Segmenter + ?Sized>(
    model: &S,
    slice: &Slice2D,
    provenance: Provenance,
) -> Result<PseudoSample> {
    let probs = model.predict_probs(slice)?;
    let (mask, confidence) = pseudo_label(&probs);
    Ok(PseudoSample {
        slice: slice.clone(),
        mask: MaskSlice::new(slice.height, slice.width, mask)?,
        confidence,
        provenance,
    })
}

/// Seeded uniform choice of `count` distinct indices out of `available`.
pub fn select_unlabeled(count: usize, available: usize, seed: u64) -> Result<Vec<usize>> {
    if count > available {
        return Err(Error::Count {
            requested: count,
            available,
        });
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), available, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Self-normalizing dropout of hidden activations; `rate = 0` is the identity.
pub fn feature_perturb(activations: &[f64], rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Input(format!("perturbation rate {rate} outside [0, 1)")));
    }
    Ok(alpha_dropout(activations, rate, seed))
}

/// Hard targets and per-pixel weights that the consistency loss applies to
/// every perturbed view. Weights are `1 / (confident pixels * views)` on
/// confident pixels and 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTargets {
    pub targets: Vec<f32>,
    pub weights: Vec<f64>,
    pub confident: usize,
}

pub fn consistency_targets(weak_probs: &[f64], tau: f64, views: usize) -> ConsistencyTargets {
    let confident = weak_probs
        .iter()
        .filter(|&&p| max_class_confidence(p) >= tau)
        .count();
    let w = if confident == 0 || views == 0 {
        0.0
    } else {
        1.0 / (confident * views) as f64
    };
    let (targets, weights) = weak_probs
        .iter()
        .map(|&p| {
            let on = max_class_confidence(p) >= tau;
            (hard_label(p) as f32, if on { w } else { 0.0 })
        })
        .unzip();
    ConsistencyTargets {
        targets,
        weights,
        confident,
    }
}

/// Cross-entropy of each view against the weak view's hard labels on
/// pixels whose weak confidence reaches `tau`, averaged over those pixels
/// and over views. Zero when no pixel is confident.
pub fn consistency_loss(weak_probs: &[f64], views: &[Vec<f64>], tau: f64) -> Result<f64> {
    if let Some(v) = views.iter().find(|v| v.len() != weak_probs.len()) {
        return Err(Error::Input(format!(
            "view has {} pixels, weak view has {}",
            v.len(),
            weak_probs.len()
        )));
    }
    let t = consistency_targets(weak_probs, tau, views.len());
    Ok(views
        .iter()
        .map(|v| {
            v.iter()
                .zip(&t.targets)
                .zip(&t.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|((&p, &y), &w)| w * bce_term(p, y as f64))
                .sum::<f64>()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_arithmetic() {
        let s = ThresholdState { tau: 0.5, momentum: 0.9 };
        let s = update_threshold(s, &[0.9, 0.9]).unwrap();
        assert!((s.tau - 0.54).abs() < 1e-12);
    }

    #[test]
    fn ema_clamps_at_floor_and_ignores_empty_batches() {
        let s = ThresholdState { tau: 0.5, momentum: 0.9 };
        assert_eq!(update_threshold(s, &[0.1]).unwrap().tau, 0.5);
        assert_eq!(update_threshold(s, &[]).unwrap(), s);
        assert!(update_threshold(s, &[1.5]).is_err());
    }

    #[test]
    fn ema_converges_to_constant_stream() {
        let m = 0.99;
        let mut s = ThresholdState::new(m).unwrap();
        for _ in 0..(10.0 / (1.0 - m)) as usize {
            s = update_threshold(s, &[0.8]).unwrap();
        }
        assert!((s.tau - 0.8).abs() < 1e-3);
    }

    #[test]
    fn argmax_pseudo_labels() {
        let (mask, conf) = pseudo_label(&[0.9, 0.1]);
        assert_eq!(mask, vec![1, 0]);
        assert!((conf[0] - 0.9).abs() < 1e-7 && (conf[1] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn selection_is_seeded_and_counted() {
        assert_eq!(select_unlabeled(3, 10, 4).unwrap(), select_unlabeled(3, 10, 4).unwrap());
        assert!(select_unlabeled(0, 0, 1).unwrap().is_empty());
        assert!(matches!(select_unlabeled(5, 4, 1), Err(Error::Count { .. })));
    }

    #[test]
    fn consistency_hand_case() {
        let l = consistency_loss(&[0.9, 0.6], &[vec![0.8, 0.3]], 0.7).unwrap();
        assert!((l - -(0.8f64.ln())).abs() < 1e-12);
        assert!((l - 0.2231).abs() < 1e-4);
    }

    #[test]
    fn consistency_fully_masked_is_zero() {
        let l = consistency_loss(&[0.6, 0.45], &[vec![0.1, 0.9], vec![0.0, 1.0]], 0.7).unwrap();
        assert_eq!(l, 0.0);
        assert!(consistency_loss(&[0.6], &[vec![0.1, 0.9]], 0.5).is_err());
    }

    #[test]
    fn consistency_agreeing_views_near_zero() {
        let eps = crate::segmenter::PROB_EPS;
        let l = consistency_loss(&[0.99, 0.02], &[vec![1.0 - eps, eps], vec![1.0, 0.0]], 0.9).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn perturb_rate_zero_is_identity() {
        let x = vec![0.3, -1.2, 2.0];
        assert_eq!(feature_perturb(&x, 0.0, 1).unwrap(), x);
        assert_eq!(feature_perturb(&x, 0.2, 7).unwrap(), feature_perturb(&x, 0.2, 7).unwrap());
        assert!(feature_perturb(&x, 1.0, 7).is_err());
    }
}

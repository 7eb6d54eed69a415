use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use super::{
    consistency_targets, max_class_confidence, pseudo_label_slice, select_unlabeled, update_threshold,
    Provenance, PseudoSample, ThresholdState,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::fourier::{fta_augment_pair, FtaConfig};
use crate::metrics::{evaluate, DistanceKind, MetricsReport};
use crate::preprocess::{extract_slice, slice_mask, slice_volume, stack_z_slices, Axis, MaskSlice, Slice2D};
use crate::segmenter::{
    adamw_step, mask_targets, poly_lr, AdamWConfig, Checkpoint, Example, ModelShape, OptimizerState, PatchMlp,
    Perturbation, Segmenter, TrainSchedule,
};
use crate::volume::{Dims, MaskVolume, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub model: ModelShape,
    pub optimizer: AdamWConfig,
    pub lr: f64,
    /// Labeled slices per optimizer step.
    pub batch: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Optimizer steps per epoch. `None` means one pass over
    /// `slice_fraction` of the labeled training slices.
    pub iters_per_epoch: Option<usize>,
    pub slice_fraction: f64,
    pub stage1_pseudo_count: usize,
    /// Alpha-dropout rate for the feature-perturbed view.
    pub perturb_rate: f64,
    /// Number of Fourier-mixed strong views per unlabeled slice.
    pub strong_views: usize,
    pub threshold_momentum: f64,
    pub consistency_weight: f64,
    /// Loss weight of stage-1 pseudo-labeled slices.
    pub pseudo_weight: f64,
    /// Random horizontal flip as the weak augmentation.
    pub flip: bool,
    pub fta: FtaConfig,
    pub distance: DistanceKind,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            optimizer: AdamWConfig::default(),
            lr: crate::segmenter::DEFAULT_LR,
            batch: 8,
            stage1_epochs: 20,
            stage2_epochs: 3,
            iters_per_epoch: None,
            slice_fraction: 1.0,
            stage1_pseudo_count: 10,
            perturb_rate: 0.1,
            strong_views: 2,
            threshold_momentum: super::DEFAULT_MOMENTUM,
            consistency_weight: 1.0,
            pseudo_weight: 1.0,
            flip: true,
            fta: FtaConfig::default(),
            distance: DistanceKind::Hausdorff,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fta.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.stage1_epochs == 0 {
            return bad("batch and stage1_epochs must be positive".into());
        }
        if !(self.perturb_rate > 0.0 && self.perturb_rate < 1.0) {
            return bad(format!("perturbation rate {} outside (0, 1)", self.perturb_rate));
        }
        if !(self.slice_fraction > 0.0 && self.slice_fraction <= 1.0) {
            return bad(format!("slice fraction {} outside (0, 1]", self.slice_fraction));
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iters_per_epoch must be positive".into());
        }
        if !(self.lr > 0.0) || self.consistency_weight < 0.0 || self.pseudo_weight < 0.0 {
            return bad("lr must be positive and loss weights non-negative".into());
        }
        ThresholdState::new(self.threshold_momentum)?;
        Ok(())
    }

    /// Optimizer steps per epoch for a labeled pool of `pool` slices.
    pub fn iters_per_epoch(&self, pool: usize) -> usize {
        self.iters_per_epoch.unwrap_or_else(|| {
            let used = (self.slice_fraction * pool as f64).ceil() as usize;
            used.div_ceil(self.batch).max(1)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: String,
    pub volume: Volume,
    pub mask: MaskVolume,
    /// `None` for annotated scans.
    pub provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledVolume {
    pub id: String,
    pub volume: Volume,
}

/// One labeled slice with its per-pixel targets and loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSlice {
    pub image: Slice2D,
    pub target: Vec<f32>,
    pub weight: f64,
}

impl TrainSlice {
    /// All three-axis slices of a labeled volume, kept when `keep(axis, index)`.
    pub fn from_volume(v: &LabeledVolume, weight: f64, keep: impl Fn(Axis, usize) -> bool) -> Vec<TrainSlice> {
        slice_volume(&v.volume, &v.id)
            .into_iter()
            .zip(slice_mask(&v.mask))
            .filter(|(s, _)| keep(s.axis, s.index))
            .map(|(image, m)| TrainSlice {
                target: mask_targets(&m),
                image,
                weight,
            })
            .collect()
    }
}

/// Foreground probabilities of a whole volume from its axial slices.
pub fn predict_volume<S: Segmenter + ?Sized>(model: &S, volume: &Volume, id: &str) -> Result<Vec<f64>> {
    let dims = volume.dims();
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.depth {
        out.extend(model.predict_probs(&extract_slice(volume, id, Axis::Z, z))?);
    }
    Ok(out)
}

pub fn segment_volume<S: Segmenter + ?Sized>(model: &S, volume: &Volume, id: &str) -> Result<MaskVolume> {
    let probs = predict_volume(model, volume, id)?;
    MaskVolume::new(volume.dims(), probs.iter().map(|&p| super::hard_label(p)).collect())
}

/// Data a model is scored on after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationSet {
    /// Whole volumes, segmented slice by slice along z.
    Volumes { name: String, cases: Vec<LabeledVolume> },
    /// Individual held-out slices, each scored as a one-plane volume.
    Slices { name: String, slices: Vec<(Slice2D, MaskSlice)> },
}

impl ValidationSet {
    pub fn name(&self) -> &str {
        match self {
            ValidationSet::Volumes { name, .. } | ValidationSet::Slices { name, .. } => name,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ValidationSet::Volumes { cases, .. } => cases.is_empty(),
            ValidationSet::Slices { slices, .. } => slices.is_empty(),
        }
    }

    /// Per-case reports, in case order.
    pub fn evaluate_cases<S: Segmenter + ?Sized>(&self, model: &S, kind: DistanceKind) -> Result<Vec<MetricsReport>> {
        match self {
            ValidationSet::Volumes { cases, .. } => cases
                .iter()
                .map(|c| evaluate(&segment_volume(model, &c.volume, &c.id)?, &c.mask, kind))
                .collect(),
            ValidationSet::Slices { slices, .. } => slices
                .iter()
                .map(|(s, m)| {
                    let probs = model.predict_probs(s)?;
                    let pred = MaskVolume::new(
                        Dims::new(1, s.height, s.width)?,
                        probs.iter().map(|&p| super::hard_label(p)).collect(),
                    )?;
                    evaluate(&pred, &m.to_mask_volume(), kind)
                })
                .collect(),
        }
    }

    pub fn evaluate<S: Segmenter + ?Sized>(&self, model: &S, kind: DistanceKind) -> Result<Option<MetricsReport>> {
        Ok(MetricsReport::mean(&self.evaluate_cases(model, kind)?))
    }
}

pub const HISTORY_HEADER: &str = "epoch,split,dice,iou,hd_norm,score,tau";

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub report: MetricsReport,
    pub tau: f64,
}

impl HistoryRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.split, r.dice, r.iou, r.hd_norm, r.score, self.tau
        )
    }
}

/// Endless seeded shuffled pass over `0..n`.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next(&mut self) -> usize {
        self.reshuffle_if_done();
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

fn flip_columns<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks_exact(width)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn weak_view(image: &Slice2D, target: Option<&[f32]>, flip: bool) -> (Slice2D, Option<Vec<f32>>) {
    if !flip {
        return (image.clone(), target.map(<[f32]>::to_vec));
    }
    let data = flip_columns(&image.data, image.width);
    (
        image.with_data(data),
        target.map(|t| flip_columns(t, image.width)),
    )
}

struct Trainer<'a> {
    model: PatchMlp,
    optimizer: OptimizerState,
    cfg: &'a StageConfig,
    validation: &'a [ValidationSet],
    history: Vec<HistoryRow>,
    losses: Vec<f64>,
    epoch_offset: usize,
}

impl Trainer<'_> {
    fn log_epoch(&mut self, epoch: usize, tau: f64) -> Result<()> {
        for v in self.validation {
            if let Some(report) = v.evaluate(&self.model, self.cfg.distance)? {
                self.history.push(HistoryRow {
                    epoch: self.epoch_offset + epoch,
                    split: v.name().to_owned(),
                    report,
                    tau,
                });
            }
        }
        Ok(())
    }

    fn step(&mut self, grad: &[f64], sched: &TrainSchedule, iteration: usize) -> Result<()> {
        let lr = poly_lr(sched, iteration)?;
        adamw_step(self.model.params_mut(), grad, &mut self.optimizer, lr)
    }

    fn supervised_term(&self, image: &Slice2D, target: &[f32], scale: f64, grad: &mut [f64]) -> Result<f64> {
        let weights = vec![scale / image.len() as f64; image.len()];
        self.model.accumulate_gradient(
            &Example {
                input: image,
                targets: target,
                weights: &weights,
                perturb: None,
            },
            grad,
        )
    }

    fn supervised_epochs(&mut self, pool: &[TrainSlice], epochs: usize, iters: usize, seed: u64) -> Result<()> {
        if pool.is_empty() {
            return Err(Error::Input("no labeled slices to train on".into()));
        }
        let sched = TrainSchedule::new(self.cfg.lr, epochs * iters)?;
        let mut sampler = Sampler::new(pool.len(), derive_seed(seed, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let mut grad = vec![0.0; self.model.params().len()];
        let batch = self.cfg.batch;
        for epoch in 0..epochs {
            for it in 0..iters {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut loss = 0.0;
                for _ in 0..batch {
                    let s = &pool[sampler.next()];
                    let flip = self.cfg.flip && rng.random_bool(0.5);
                    let (image, target) = weak_view(&s.image, Some(&s.target), flip);
                    loss += self.supervised_term(&image, &target.unwrap(), s.weight / batch as f64, &mut grad)?;
                }
                self.losses.push(loss);
                self.step(&grad, &sched, epoch * iters + it)?;
            }
            self.log_epoch(epoch + 1, ThresholdState::FLOOR)?;
        }
        Ok(())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
        .quantized()
    }
}

/// Plain supervised training, the same loop stage 1 runs. Returns the
/// final checkpoint, per-epoch history and per-iteration losses.
pub fn train_supervised(
    init: Checkpoint,
    pool: &[TrainSlice],
    cfg: &StageConfig,
    epochs: usize,
    iters_per_epoch: usize,
    seed: u64,
    validation: &[ValidationSet],
    epoch_offset: usize,
) -> Result<(Checkpoint, Vec<HistoryRow>, Vec<f64>)> {
    let mut t = Trainer {
        model: init.model,
        optimizer: init.optimizer,
        cfg,
        validation,
        history: Vec::new(),
        losses: Vec::new(),
        epoch_offset,
    };
    t.supervised_epochs(pool, epochs, iters_per_epoch, seed)?;
    Ok((t.checkpoint(), t.history, t.losses))
}

/// A pseudo-labeled scan built from per-slice predictions along z.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoVolume {
    pub id: String,
    pub volume: Volume,
    pub samples: Vec<PseudoSample>,
}

impl PseudoVolume {
    pub fn mask(&self) -> Result<MaskVolume> {
        let dims = self.volume.dims();
        let data = self.samples.iter().flat_map(|s| s.mask.data.iter().copied()).collect();
        MaskVolume::new(dims, data)
    }

    pub fn to_labeled(&self) -> Result<LabeledVolume> {
        Ok(LabeledVolume {
            id: self.id.clone(),
            volume: self.volume.clone(),
            mask: self.mask()?,
            provenance: self.samples.first().map(|s| s.provenance),
        })
    }
}

/// Pseudo-labels `count` unlabeled scans chosen uniformly without replacement.
pub fn generate_pseudo_labels<S: Segmenter + ?Sized>(
    model: &S,
    unlabeled: &[UnlabeledVolume],
    count: usize,
    seed: u64,
    provenance: Provenance,
) -> Result<Vec<PseudoVolume>> {
    let picked = select_unlabeled(count, unlabeled.len(), seed)?;
    picked
        .into_iter()
        .map(|i| {
            let u = &unlabeled[i];
            let samples = (0..u.volume.dims().depth)
                .map(|z| pseudo_label_slice(model, &extract_slice(&u.volume, &u.id, Axis::Z, z), provenance))
                .collect::<Result<Vec<_>>>()?;
            // Sanity: the axial planes reassemble the source scan.
            debug_assert_eq!(
                stack_z_slices(&samples.iter().map(|s| s.slice.clone()).collect::<Vec<_>>())
                    .map(|v| v == u.volume)
                    .ok(),
                Some(true)
            );
            Ok(PseudoVolume {
                id: u.id.clone(),
                volume: u.volume.clone(),
                samples,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub checkpoint: Checkpoint,
    pub pseudo: Vec<PseudoVolume>,
    /// Labeled training slices followed by every slice of the pseudo-labeled scans.
    pub merged: Vec<TrainSlice>,
    /// Ids of the annotated scans followed by the pseudo-labeled ones.
    pub merged_ids: Vec<String>,
    /// Unlabeled scans that were not pseudo-labeled.
    pub remaining: Vec<UnlabeledVolume>,
    pub history: Vec<HistoryRow>,
    pub losses: Vec<f64>,
    pub iters_per_epoch: usize,
}

/// Supervised bootstrap followed by pseudo-labeling of
/// `min(stage1_pseudo_count, |unlabeled|)` scans.
pub fn run_stage1(
    labeled_ids: &[String],
    labeled: &[TrainSlice],
    unlabeled: &[UnlabeledVolume],
    cfg: &StageConfig,
    validation: &[ValidationSet],
) -> Result<Stage1Output> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Input("stage 1 needs labeled slices".into()));
    }
    let seed = derive_seed(cfg.seed, 0x5741_4745_0001);
    let model = PatchMlp::new(cfg.model, derive_seed(seed, 0))?;
    let optimizer = OptimizerState::new(model.params().len(), cfg.optimizer);
    let iters = cfg.iters_per_epoch(labeled.len());
    let (checkpoint, history, losses) = train_supervised(
        Checkpoint { model, optimizer },
        labeled,
        cfg,
        cfg.stage1_epochs,
        iters,
        seed,
        validation,
        0,
    )?;

    let count = cfg.stage1_pseudo_count.min(unlabeled.len());
    let pseudo = generate_pseudo_labels(&checkpoint.model, unlabeled, count, derive_seed(seed, 3), Provenance::Stage1)?;
    let mut merged = labeled.to_vec();
    let mut merged_ids = labeled_ids.to_vec();
    for p in &pseudo {
        merged.extend(TrainSlice::from_volume(&p.to_labeled()?, cfg.pseudo_weight, |_, _| true));
        merged_ids.push(p.id.clone());
    }
    let remaining = unlabeled
        .iter()
        .filter(|u| !pseudo.iter().any(|p| p.id == u.id))
        .cloned()
        .collect();
    Ok(Stage1Output {
        checkpoint,
        pseudo,
        merged,
        merged_ids,
        remaining,
        history,
        losses,
        iters_per_epoch: iters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub losses: Vec<f64>,
    pub tau_history: Vec<f64>,
    pub warnings: Vec<String>,
}

struct UnlabeledItem {
    weak: Slice2D,
    views: Vec<(Slice2D, Option<Perturbation>)>,
    weak_probs: Vec<f64>,
}

/// Fourier-mixed consistency training on the merged labeled set and the
/// remaining unlabeled scans. `iters_per_epoch` fixes the step budget so
/// runs with different pool sizes stay comparable.
pub fn run_stage2(
    init: Checkpoint,
    merged: &[TrainSlice],
    remaining: &[UnlabeledVolume],
    cfg: &StageConfig,
    iters_per_epoch: usize,
    validation: &[ValidationSet],
) -> Result<Stage2Output> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, 0x5741_4745_0002);
    let epochs = cfg.stage2_epochs;
    let offset = cfg.stage1_epochs;
    let init = Checkpoint {
        optimizer: OptimizerState::new(init.model.params().len(), cfg.optimizer),
        ..init
    };
    if epochs == 0 {
        return Ok(Stage2Output {
            checkpoint: init,
            history: Vec::new(),
            losses: Vec::new(),
            tau_history: Vec::new(),
            warnings: Vec::new(),
        });
    }

    let unlabeled: Vec<Slice2D> = remaining
        .iter()
        .flat_map(|u| slice_volume(&u.volume, &u.id))
        .collect();
    if unlabeled.is_empty() {
        let (checkpoint, history, losses) =
            train_supervised(init, merged, cfg, epochs, iters_per_epoch, seed, validation, offset)?;
        let n = losses.len();
        return Ok(Stage2Output {
            checkpoint,
            history,
            losses,
            tau_history: vec![ThresholdState::FLOOR; n],
            warnings: vec!["unlabeled pool is empty; stage 2 ran supervised only".into()],
        });
    }
    if merged.is_empty() {
        return Err(Error::Input("stage 2 needs labeled slices".into()));
    }

    let mut by_shape: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in unlabeled.iter().enumerate() {
        by_shape.entry((s.height, s.width)).or_default().push(i);
    }

    let mut t = Trainer {
        model: init.model,
        optimizer: init.optimizer,
        cfg,
        validation,
        history: Vec::new(),
        losses: Vec::new(),
        epoch_offset: offset,
    };
    let sched = TrainSchedule::new(cfg.lr, epochs * iters_per_epoch)?;
    let mut sampler = Sampler::new(merged.len(), derive_seed(seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut threshold = ThresholdState::new(cfg.threshold_momentum)?;
    let mut tau_history = Vec::with_capacity(epochs * iters_per_epoch);
    let mut grad = vec![0.0; t.model.params().len()];
    let batch = cfg.batch;

    for epoch in 0..epochs {
        for it in 0..iters_per_epoch {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            let mut items: Vec<UnlabeledItem> = Vec::with_capacity(batch);

            for _ in 0..batch {
                let s = &merged[sampler.next()];
                let flip = cfg.flip && rng.random_bool(0.5);
                let (x_w, y_w) = weak_view(&s.image, Some(&s.target), flip);
                let y_w = y_w.unwrap();
                let partners = by_shape.get(&(x_w.height, x_w.width));
                let Some(partners) = partners else {
                    loss += t.supervised_term(&x_w, &y_w, s.weight / batch as f64, &mut grad)?;
                    continue;
                };
                let u = &unlabeled[partners[rng.random_range(0..partners.len())]];
                let flip_u = cfg.flip && rng.random_bool(0.5);
                let (x_u, _) = weak_view(u, None, flip_u);

                let mut views = Vec::with_capacity(cfg.strong_views + 1);
                let mut z_w = None;
                for _ in 0..cfg.strong_views.max(1) {
                    let fta = FtaConfig {
                        seed: rng.random(),
                        ..cfg.fta
                    };
                    let aug = fta_augment_pair(&x_w, &x_u, &fta)?;
                    if z_w.is_none() {
                        z_w = Some(aug.z_w);
                    }
                    if views.len() < cfg.strong_views {
                        views.push((aug.z_u, None));
                    }
                }
                views.push((
                    x_u.clone(),
                    Some(Perturbation {
                        rate: cfg.perturb_rate,
                        seed: rng.random(),
                    }),
                ));

                let scale = s.weight / (2 * batch) as f64;
                loss += t.supervised_term(&x_w, &y_w, scale, &mut grad)?;
                loss += t.supervised_term(&z_w.unwrap(), &y_w, scale, &mut grad)?;

                let weak_probs = t.model.predict_probs(&x_u)?;
                items.push(UnlabeledItem {
                    weak: x_u,
                    views,
                    weak_probs,
                });
            }

            let confidences: Vec<f64> = items
                .iter()
                .flat_map(|i| i.weak_probs.iter().map(|&p| max_class_confidence(p)))
                .collect();
            threshold = update_threshold(threshold, &confidences)?;
            tau_history.push(threshold.tau);

            if !items.is_empty() {
                let unit = cfg.consistency_weight / batch as f64;
                for item in &items {
                    let targets = consistency_targets(&item.weak_probs, threshold.tau, item.views.len());
                    if targets.confident == 0 {
                        continue;
                    }
                    let weights: Vec<f64> = targets.weights.iter().map(|w| w * unit).collect();
                    for (view, perturb) in &item.views {
                        debug_assert_eq!(view.len(), item.weak.len());
                        loss += t.model.accumulate_gradient(
                            &Example {
                                input: view,
                                targets: &targets.targets,
                                weights: &weights,
                                perturb: *perturb,
                            },
                            &mut grad,
                        )?;
                    }
                }
            }
            t.losses.push(loss);
            t.step(&grad, &sched, epoch * iters_per_epoch + it)?;
        }
        t.log_epoch(epoch + 1, threshold.tau)?;
    }
    Ok(Stage2Output {
        checkpoint: t.checkpoint(),
        history: t.history,
        losses: t.losses,
        tau_history,
        warnings: Vec::new(),
    })
}

//! End-to-end driver: preprocess, stage 1, stage 2, final scoring.
//!
//! A run directory holds `config.txt`, `seed.txt`, `manifest.txt`,
//! `slices.csv`, `stage1.seg`, `stage2.seg`, `history.csv`, `metrics.csv`
//! and `run.log`.

mod config;
mod data;

pub use config::{format_lambda, parse_lambda, PipelineConfig};
pub use data::{load_cases, load_unlabeled, write_benchmark, Dataset};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::preprocess::{
    extract_mask_slice, extract_slice, split_train_val, window_normalize, SliceManifest, Split,
};
use crate::segmenter::{save_checkpoint, Checkpoint};
use crate::ssl::{
    run_stage1, run_stage2, HistoryRow, LabeledVolume, PseudoVolume, Stage1Output, Stage2Output,
    StageConfig, TrainSlice, UnlabeledVolume, ValidationSet, HISTORY_HEADER,
};

const SPLIT_SALT: u64 = 0x53_504c_4954;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Setup,
    Preprocess,
    Stage1,
    Stage2,
    Scoring,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Preprocess => "preprocess",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Scoring => "scoring",
        })
    }
}

#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl StageFailure {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageFailure>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageFailure> {
        self.map_err(|error| StageFailure { stage, error })
    }
}

/// Line-oriented log with ISO-8601 timestamps, mirrored to a file when one is open.
#[derive(Default)]
pub struct RunLog {
    file: Option<File>,
    pub lines: Vec<String>,
}

impl RunLog {
    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            file: Some(File::create(path).map_err(|e| Error::io(path, e))?),
            lines: Vec::new(),
        })
    }

    pub fn info(&mut self, msg: impl AsRef<str>) {
        self.write("INFO", msg.as_ref());
    }

    pub fn warn(&mut self, msg: impl AsRef<str>) {
        self.write("WARN", msg.as_ref());
    }

    pub fn error(&mut self, msg: impl AsRef<str>) {
        self.write("ERROR", msg.as_ref());
    }

    fn write(&mut self, level: &str, msg: &str) {
        let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let line = format!("{now} {level} {msg}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
        self.lines.push(line);
    }
}

/// Windowed data, the slice split and the validation sets.
pub struct Prepared {
    pub labeled: Vec<LabeledVolume>,
    pub unlabeled: Vec<UnlabeledVolume>,
    pub val: Vec<LabeledVolume>,
    pub manifest: SliceManifest,
    pub train: Vec<TrainSlice>,
    pub validation: Vec<ValidationSet>,
}

impl Prepared {
    pub fn labeled_ids(&self) -> Vec<String> {
        self.labeled.iter().map(|v| v.id.clone()).collect()
    }

    /// The set the final metrics are computed on.
    pub fn scoring_set(&self) -> &ValidationSet {
        let pick = if self.val.is_empty() { "holdout" } else { "val" };
        self.validation.iter().find(|v| v.name() == pick).unwrap()
    }
}

pub fn prepare(data: &Dataset, cfg: &PipelineConfig) -> Result<Prepared> {
    if data.labeled.is_empty() {
        return Err(Error::Input("no labeled volumes".into()));
    }
    let window = |v| window_normalize(v, cfg.window);
    let labeled: Vec<LabeledVolume> = data
        .labeled
        .iter()
        .map(|c| {
            Ok(LabeledVolume {
                id: c.id.clone(),
                volume: window(&c.volume)?,
                mask: c.mask.clone(),
                provenance: None,
            })
        })
        .collect::<Result<_>>()?;
    let val = data
        .val
        .iter()
        .map(|c| {
            Ok(LabeledVolume {
                id: c.id.clone(),
                volume: window(&c.volume)?,
                mask: c.mask.clone(),
                provenance: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = if cfg.supervised_only {
        Vec::new()
    } else {
        data.unlabeled
            .iter()
            .map(|u| {
                Ok(UnlabeledVolume {
                    id: u.id.clone(),
                    volume: window(&u.volume)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut manifest = SliceManifest::default();
    for v in &labeled {
        manifest.push_volume(&v.id, v.volume.dims());
    }
    let manifest = split_train_val(&manifest, cfg.val_fraction, derive_seed(cfg.seed(), SPLIT_SALT))?;
    let mut held: BTreeMap<&str, BTreeSet<(usize, usize)>> = BTreeMap::new();
    let mut holdout = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == Split::Val) {
        held.entry(&e.source_id).or_default().insert((e.axis as usize, e.index));
        let v = labeled.iter().find(|v| v.id == e.source_id).unwrap();
        holdout.push((
            extract_slice(&v.volume, &v.id, e.axis, e.index),
            extract_mask_slice(&v.mask, e.axis, e.index),
        ));
    }
    let train = labeled
        .iter()
        .flat_map(|v| {
            let h = held.get(v.id.as_str());
            TrainSlice::from_volume(v, 1.0, |axis, i| !h.is_some_and(|h| h.contains(&(axis as usize, i))))
        })
        .collect();

    let mut validation = vec![ValidationSet::Slices {
        name: "holdout".into(),
        slices: holdout,
    }];
    if !val.is_empty() {
        validation.push(ValidationSet::Volumes {
            name: "val".into(),
            cases: val.clone(),
        });
    }
    Ok(Prepared {
        labeled,
        unlabeled,
        val,
        manifest,
        train,
        validation,
    })
}

/// The stage configuration a run actually uses.
pub fn effective_stage(cfg: &PipelineConfig) -> StageConfig {
    let mut s = cfg.stage.clone();
    if cfg.supervised_only {
        s.stage1_pseudo_count = 0;
    }
    s
}

pub fn stage1(p: &Prepared, cfg: &PipelineConfig) -> Result<Stage1Output> {
    run_stage1(&p.labeled_ids(), &p.train, &p.unlabeled, &effective_stage(cfg), &p.validation)
}

/// Stage 2 from a stage-1 checkpoint and its pseudo-labeled scans.
pub fn stage2(
    p: &Prepared,
    cfg: &PipelineConfig,
    init: Checkpoint,
    pseudo: &[LabeledVolume],
    iters_per_epoch: usize,
) -> Result<Stage2Output> {
    let stage = effective_stage(cfg);
    let mut merged = p.train.clone();
    for v in pseudo {
        merged.extend(TrainSlice::from_volume(v, stage.pseudo_weight, |_, _| true));
    }
    let remaining: Vec<UnlabeledVolume> = p
        .unlabeled
        .iter()
        .filter(|u| !pseudo.iter().any(|v| v.id == u.id))
        .cloned()
        .collect();
    run_stage2(init, &merged, &remaining, &stage, iters_per_epoch, &p.validation)
}

pub fn iters_per_epoch(p: &Prepared, cfg: &PipelineConfig) -> usize {
    cfg.stage.iters_per_epoch(p.train.len())
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn metrics_csv(cases: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{}\n", MetricsReport::CSV_HEADER);
    for (id, r) in cases {
        out.push_str(&r.csv_row(id));
        out.push('\n');
    }
    let reports: Vec<MetricsReport> = cases.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = MetricsReport::mean(&reports) {
        out.push_str(&mean.csv_row("mean"));
        out.push('\n');
    }
    out
}

pub struct RunOutput {
    pub stage1: Stage1Output,
    pub stage2: Stage2Output,
    pub cases: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    pub manifest: String,
    pub slices: SliceManifest,
}

impl RunOutput {
    pub fn history(&self) -> Vec<HistoryRow> {
        let mut h = self.stage1.history.clone();
        h.extend(self.stage2.history.iter().cloned());
        h
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.cases)
    }
}

fn ids<'a>(it: impl IntoIterator<Item = &'a String>) -> String {
    it.into_iter().map(String::as_str).collect::<Vec<_>>().join(",")
}

/// Runs every stage in memory. Nothing is written except through `log`.
pub fn run_experiment(data: &Dataset, cfg: &PipelineConfig, log: &mut RunLog) -> Result<RunOutput, StageFailure> {
    cfg.validate().at(Stage::Setup)?;
    log.info(format!("preprocess: {} labeled, {} unlabeled, {} val", data.labeled.len(), data.unlabeled.len(), data.val.len()));
    let p = prepare(data, cfg).at(Stage::Preprocess)?;
    log.info(format!(
        "preprocess: {} train slices, {} holdout slices",
        p.manifest.count(Split::Train),
        p.manifest.count(Split::Val)
    ));

    let s1 = stage1(&p, cfg).at(Stage::Stage1)?;
    log.info(format!(
        "stage1: {} iterations, pseudo-labeled [{}], merged {} volumes",
        s1.losses.len(),
        ids(s1.pseudo.iter().map(|v| &v.id)),
        s1.merged_ids.len()
    ));

    let pseudo: Vec<LabeledVolume> = s1.pseudo.iter().map(PseudoVolume::to_labeled).collect::<Result<_>>().at(Stage::Stage1)?;
    let s2 = stage2(&p, cfg, s1.checkpoint.clone(), &pseudo, s1.iters_per_epoch).at(Stage::Stage2)?;
    for w in &s2.warnings {
        log.warn(format!("stage2: {w}"));
    }
    log.info(format!(
        "stage2: {} iterations, final tau {:.6}",
        s2.losses.len(),
        s2.tau_history.last().copied().unwrap_or(crate::ssl::ThresholdState::FLOOR)
    ));

    let set = p.scoring_set();
    let reports = set
        .evaluate_cases(&s2.checkpoint.model, cfg.stage.distance)
        .at(Stage::Scoring)?;
    let names: Vec<String> = match set {
        ValidationSet::Volumes { cases, .. } => cases.iter().map(|c| c.id.clone()).collect(),
        ValidationSet::Slices { slices, .. } => slices.iter().map(|(s, _)| s.file_name()).collect(),
    };
    let cases: Vec<(String, MetricsReport)> = names.into_iter().zip(reports).collect();
    let mean = MetricsReport::mean(&cases.iter().map(|(_, r)| *r).collect::<Vec<_>>())
        .ok_or_else(|| Error::Input("nothing to score".into()))
        .at(Stage::Scoring)?;
    log.info(format!("scoring: {} on {} cases, mean dice {:.6}, score {:.6}", set.name(), cases.len(), mean.dice, mean.score));

    let manifest = run_manifest(cfg, &p, &s1, &s2, set.name());
    Ok(RunOutput {
        stage1: s1,
        stage2: s2,
        cases,
        mean,
        manifest,
        slices: p.manifest,
    })
}

fn run_manifest(cfg: &PipelineConfig, p: &Prepared, s1: &Stage1Output, s2: &Stage2Output, scored: &str) -> String {
    let mut m = String::new();
    for line in cfg.to_text().lines() {
        writeln!(m, "config.{line}").unwrap();
    }
    let seed = cfg.seed();
    let kv: Vec<(&str, String)> = vec![
        ("seed.global", seed.to_string()),
        ("seed.split", derive_seed(seed, SPLIT_SALT).to_string()),
        ("files.labeled", ids(p.labeled.iter().map(|v| &v.id))),
        ("files.unlabeled", ids(p.unlabeled.iter().map(|v| &v.id))),
        ("files.val", ids(p.val.iter().map(|v| &v.id))),
        ("slices.train", p.manifest.count(Split::Train).to_string()),
        ("slices.holdout", p.manifest.count(Split::Val).to_string()),
        ("stage1.epochs", effective_stage(cfg).stage1_epochs.to_string()),
        ("stage1.iters_per_epoch", s1.iters_per_epoch.to_string()),
        ("stage1.iterations", s1.losses.len().to_string()),
        ("stage1.pseudo_labeled", ids(s1.pseudo.iter().map(|v| &v.id))),
        ("stage1.merged", ids(&s1.merged_ids)),
        ("stage1.merged_count", s1.merged_ids.len().to_string()),
        ("stage1.remaining_unlabeled", s1.remaining.len().to_string()),
        ("stage2.epochs", cfg.stage.stage2_epochs.to_string()),
        ("stage2.iterations", s2.losses.len().to_string()),
        (
            "stage2.final_tau",
            s2.tau_history.last().map_or_else(String::new, |t| format!("{t:.6}")),
        ),
        ("stage2.warnings", s2.warnings.join("; ")),
        ("scoring.set", scored.to_owned()),
    ];
    for (k, v) in kv {
        writeln!(m, "{k} = {v}").unwrap();
    }
    m
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads or generates the data for a config.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    match &cfg.labeled_dir {
        None => Dataset::from_benchmark(cfg.synth.generate()?),
        Some(dir) => Ok(Dataset {
            labeled: load_cases(dir)?,
            unlabeled: cfg.unlabeled_dir.as_deref().map(load_unlabeled).transpose()?.unwrap_or_default(),
            val: cfg.val_dir.as_deref().map(load_cases).transpose()?.unwrap_or_default(),
        }),
    }
}

/// Full run writing every artifact into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput, StageFailure> {
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at(Stage::Setup)?;
    let mut log = RunLog::to_file(&out.join("run.log")).at(Stage::Setup)?;
    let result: Result<RunOutput, StageFailure> = (|| {
        write_file(&out.join("config.txt"), cfg.to_text()).at(Stage::Setup)?;
        write_file(&out.join("seed.txt"), format!("seed = {}\n", cfg.seed())).at(Stage::Setup)?;
        log.info(format!("run start, seed {}", cfg.seed()));
        let data = load_dataset(cfg).at(Stage::Preprocess)?;
        let run = run_experiment(&data, cfg, &mut log)?;
        let p = Stage::Scoring;
        write_file(&out.join("manifest.txt"), &run.manifest).at(p)?;
        run.slices.save(out.join("slices.csv")).at(p)?;
        save_checkpoint(&run.stage1.checkpoint, out.join("stage1.seg")).at(Stage::Stage1)?;
        save_checkpoint(&run.stage2.checkpoint, out.join("stage2.seg")).at(Stage::Stage2)?;
        write_file(&out.join("history.csv"), history_csv(&run.history())).at(p)?;
        write_file(&out.join("metrics.csv"), run.metrics_csv()).at(p)?;
        Ok(run)
    })();
    match &result {
        Ok(_) => log.info("run complete"),
        Err(f) => log.error(format!("stage {} failed: {}", f.stage, f.error)),
    }
    result
}

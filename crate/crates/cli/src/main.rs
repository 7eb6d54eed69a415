use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dentseg::fourier::fta_augment_pair;
use dentseg::metrics::{evaluate, DistanceKind, MetricsReport};
use dentseg::overlay::render_overlay;
use dentseg::pipeline::{
    history_csv, iters_per_epoch, load_dataset, metrics_csv, prepare, run_pipeline, stage1, stage2, write_benchmark,
    PipelineConfig, StageFailure,
};
use dentseg::preprocess::{
    extract_mask_slice, extract_slice, save_slice, slice_mask, slice_volume, split_train_val, window_normalize,
    Axis, SliceManifest, WindowSpec, DEFAULT_VAL_FRACTION,
};
use dentseg::segmenter::{load_checkpoint, save_checkpoint};
use dentseg::ssl::{LabeledVolume, Provenance, UnlabeledVolume};
use dentseg::volume::{load_mask, load_volume, load_volume_as, save_mask, save_volume, ValueUnit, Volume};

#[derive(Parser)]
#[command(name = "dentseg", version, about = "Semi-supervised volume segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fixed mixing ratio, or `uniform:MAX`.
    #[arg(long)]
    lambda: Option<String>,
    /// Side of the low-frequency mask as a fraction of the slice.
    #[arg(long)]
    beta: Option<f64>,
    /// `paper-literal` or `standard-fda`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps per epoch.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    pseudo_weight: Option<f64>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_owned(), v));
            }
        };
        put("fta_lambda", self.lambda.clone());
        put("fta_beta", self.beta.map(|v| v.to_string()));
        put("fta_mode", self.mode.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("iters_per_epoch", self.iters.map(|v| v.to_string()));
        put("patch", self.patch.map(|v| v.to_string()));
        put("pseudo_weight", self.pseudo_weight.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| dentseg::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clamp and rescale a raw volume.
    Window {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500.0)]
        bottom: f32,
        #[arg(long, default_value_t = 2000.0)]
        top: f32,
    },
    /// Cut a volume (and optionally its mask) into slices along every axis.
    Slice {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Source id used in file names; defaults to the input file stem.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mix the low-frequency amplitudes of two slices.
    Fta {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        #[arg(long)]
        out_labeled: PathBuf,
        #[arg(long)]
        out_unlabeled: PathBuf,
        #[arg(long, default_value = "0.5")]
        lambda: String,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value = "paper-literal")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supervised bootstrap and pseudo-labeling.
    TrainStage1 {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consistency training from a stage-1 output directory.
    TrainStage2 {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted mask against ground truth.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "hausdorff")]
        distance: String,
    },
    /// Render prediction and ground truth over one slice as a PPM.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "z")]
        axis: String,
        /// Defaults to the middle slice.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_any_volume(path: &Path) -> Result<Volume> {
    Ok(load_volume_as(path, ValueUnit::Normalized).or_else(|_| load_volume(path))?)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn read_kv(path: &Path, key: &str) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_owned())
        .ok_or_else(|| anyhow!(dentseg::Error::Format(format!("{} has no {key}", path.display()))))
}

fn slice_cmd(input: &Path, mask: Option<&Path>, out: &Path, id: Option<String>, frac: f64, seed: u64) -> Result<()> {
    let vol = load_any_volume(input)?;
    let id = id.unwrap_or_else(|| input.file_stem().unwrap_or_default().to_string_lossy().into_owned());
    mkdir(out)?;
    let slices = slice_volume(&vol, &id);
    for s in &slices {
        save_slice(s, out.join(s.file_name()))?;
    }
    if let Some(mask) = mask {
        let m = load_mask(mask)?;
        let dir = out.join("masks");
        mkdir(&dir)?;
        for (s, ms) in slices.iter().zip(slice_mask(&m)) {
            save_mask(&ms.to_mask_volume(), dir.join(s.file_name()))?;
        }
    }
    let manifest = split_train_val(&SliceManifest::for_volume(&id, vol.dims()), frac, seed)?;
    manifest.save(out.join("slices.csv"))?;
    println!("{} slices written to {}", slices.len(), out.display());
    Ok(())
}

fn stage1_cmd(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let p = prepare(&data, cfg)?;
    let s1 = stage1(&p, cfg)?;
    mkdir(&out.join("pseudo"))?;
    save_checkpoint(&s1.checkpoint, out.join("stage1.seg"))?;
    for v in &s1.pseudo {
        save_mask(&v.mask()?, out.join("pseudo").join(format!("{}_mask.vol", v.id)))?;
    }
    let ids: Vec<&str> = s1.pseudo.iter().map(|v| v.id.as_str()).collect();
    write(
        &out.join("stage1.txt"),
        format!(
            "pseudo_labeled = {}\nmerged_count = {}\niters_per_epoch = {}\n",
            ids.join(","),
            s1.merged_ids.len(),
            s1.iters_per_epoch
        ),
    )?;
    write(&out.join("config.txt"), cfg.to_text())?;
    write(&out.join("history.csv"), history_csv(&s1.history))?;
    println!("stage 1 done: merged {} volumes", s1.merged_ids.len());
    Ok(())
}

fn stage2_cmd(cfg: &PipelineConfig, stage1_dir: &Path, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    let p = prepare(&data, cfg)?;
    let init = load_checkpoint(stage1_dir.join("stage1.seg"))?;
    let manifest = stage1_dir.join("stage1.txt");
    let listed = read_kv(&manifest, "pseudo_labeled")?;
    let pseudo = listed
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|id| {
            let u: &UnlabeledVolume = p
                .unlabeled
                .iter()
                .find(|u| u.id == id)
                .ok_or_else(|| dentseg::Error::Input(format!("pseudo-labeled scan {id} not in the unlabeled set")))?;
            Ok(LabeledVolume {
                id: id.to_owned(),
                volume: u.volume.clone(),
                mask: load_mask(stage1_dir.join("pseudo").join(format!("{id}_mask.vol")))?,
                provenance: Some(Provenance::Stage1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let iters = match read_kv(&manifest, "iters_per_epoch") {
        Ok(v) => v.parse().map_err(|_| dentseg::Error::Format(format!("bad iters_per_epoch {v:?}")))?,
        Err(_) => iters_per_epoch(&p, cfg),
    };
    let s2 = stage2(&p, cfg, init, &pseudo, iters)?;
    for w in &s2.warnings {
        eprintln!("warning: {w}");
    }
    mkdir(out)?;
    save_checkpoint(&s2.checkpoint, out.join("stage2.seg"))?;
    write(&out.join("history.csv"), history_csv(&s2.history))?;
    let set = p.scoring_set();
    let reports = set.evaluate_cases(&s2.checkpoint.model, cfg.stage.distance)?;
    let names: Vec<String> = match set {
        dentseg::ssl::ValidationSet::Volumes { cases, .. } => cases.iter().map(|c| c.id.clone()).collect(),
        dentseg::ssl::ValidationSet::Slices { slices, .. } => slices.iter().map(|(s, _)| s.file_name()).collect(),
    };
    let csv = metrics_csv(&names.into_iter().zip(reports).collect::<Vec<_>>());
    write(&out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let cfg = match spec {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            let bench = cfg.synth.generate()?;
            write_benchmark(&bench, &out)?;
            println!(
                "{} labeled, {} unlabeled, {} val written to {}",
                bench.labeled.len(),
                bench.unlabeled.len(),
                bench.val.len(),
                out.display()
            );
        }
        Command::Window { input, out, bottom, top } => {
            let w = WindowSpec::new(bottom, top)?;
            save_volume(&window_normalize(&load_volume(&input)?, w)?, &out)?;
        }
        Command::Slice {
            input,
            mask,
            out,
            id,
            val_fraction,
            seed,
        } => slice_cmd(&input, mask.as_deref(), &out, id, val_fraction, seed)?,
        Command::Fta {
            labeled,
            unlabeled,
            out_labeled,
            out_unlabeled,
            lambda,
            beta,
            mode,
            seed,
        } => {
            let cfg = dentseg::fourier::FtaConfig {
                lambda: dentseg::pipeline::parse_lambda(&lambda)?,
                mask_fraction: beta,
                mode: mode.parse()?,
                seed,
            };
            cfg.validate()?;
            let a = dentseg::preprocess::load_slice(&labeled, ValueUnit::Normalized)?;
            let b = dentseg::preprocess::load_slice(&unlabeled, ValueUnit::Normalized)?;
            let pair = fta_augment_pair(&a, &b, &cfg)?;
            save_slice(&pair.z_w, &out_labeled)?;
            save_slice(&pair.z_u, &out_unlabeled)?;
            println!("lambda = {}", pair.lambda_used);
        }
        Command::TrainStage1 { cfg, out } => stage1_cmd(&cfg.load()?, &out)?,
        Command::TrainStage2 { cfg, stage1, out } => stage2_cmd(&cfg.load()?, &stage1, &out)?,
        Command::Score { pred, gt, distance } => {
            let kind: DistanceKind = distance.parse()?;
            let report = evaluate(&load_mask(&pred)?, &load_mask(&gt)?, kind)?;
            let case = pred.file_stem().unwrap_or_default().to_string_lossy();
            println!("{}", MetricsReport::CSV_HEADER);
            println!("{}", report.csv_row(&case));
        }
        Command::Overlay {
            image,
            pred,
            gt,
            axis,
            index,
            out,
        } => {
            let axis: Axis = axis.parse()?;
            let vol = load_any_volume(&image)?;
            let (p, g) = (load_mask(&pred)?, load_mask(&gt)?);
            if p.dims() != vol.dims() || g.dims() != vol.dims() {
                bail!(dentseg::Error::Input(format!(
                    "image {}, prediction {} and ground truth {} differ",
                    vol.dims(),
                    p.dims(),
                    g.dims()
                )));
            }
            let extent = axis.extent(vol.dims());
            let index = index.unwrap_or(extent / 2);
            if index >= extent {
                bail!(dentseg::Error::Input(format!("slice {index} outside 0..{extent}")));
            }
            let id = image.file_stem().unwrap_or_default().to_string_lossy();
            render_overlay(
                &extract_slice(&vol, &id, axis, index),
                &extract_mask_slice(&p, axis, index),
                &extract_mask_slice(&g, axis, index),
                &out,
            )?;
        }
        Command::Pipeline { cfg, out } => {
            let mut cfg = cfg.load()?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let run = run_pipeline(&cfg)?;
            print!("{}", run.metrics_csv());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(f) = e.downcast_ref::<StageFailure>() {
        return f.exit_code() as u8;
    }
    e.chain()
        .find_map(|c| c.downcast_ref::<dentseg::Error>())
        .map_or(3, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

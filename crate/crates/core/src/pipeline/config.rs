use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fourier::LambdaPolicy;
use crate::preprocess::{WindowSpec, DEFAULT_VAL_FRACTION};
use crate::ssl::StageConfig;
use crate::synth::BenchmarkSpec;
use crate::volume::Dims;

/// Everything a run depends on. Loaded from flat `key = value` text; every
/// key is optional. With no data directories the run uses the generated
/// benchmark described by the `synth_*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub labeled_dir: Option<PathBuf>,
    pub unlabeled_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub window: WindowSpec,
    /// Fraction of labeled slices held out for per-epoch validation.
    pub val_fraction: f64,
    /// Skip pseudo-labeling and unlabeled data entirely.
    pub supervised_only: bool,
    pub stage: StageConfig,
    pub synth: BenchmarkSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            labeled_dir: None,
            unlabeled_dir: None,
            val_dir: None,
            out_dir: PathBuf::from("run"),
            window: WindowSpec::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
            supervised_only: false,
            stage: StageConfig::default(),
            synth: BenchmarkSpec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_dir(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

pub fn parse_lambda(value: &str) -> Result<LambdaPolicy> {
    match value.strip_prefix("uniform:") {
        Some(max) => Ok(LambdaPolicy::Uniform {
            max: parse("fta_lambda", max)?,
        }),
        None => Ok(LambdaPolicy::Fixed(parse("fta_lambda", value)?)),
    }
}

pub fn format_lambda(l: LambdaPolicy) -> String {
    match l {
        LambdaPolicy::Fixed(v) => format!("{v}"),
        LambdaPolicy::Uniform { max } => format!("uniform:{max}"),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

fn format_triple(v: [f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse_dims(value: &str) -> Result<Dims> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| parse("synth_dims", p.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [d, h, w] => Dims::new(d, h, w).map_err(|e| Error::Config(e.to_string())),
        _ => Err(Error::Config(format!("synth_dims: expected DxHxW, got {value:?}"))),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut bottom, mut top) = (cfg.window.bottom(), cfg.window.top());
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "window_bottom" => bottom = parse(key, value)?,
                "window_top" => top = parse(key, value)?,
                _ => cfg.set(key, value)?,
            }
        }
        cfg.window = WindowSpec::new(bottom, top).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> u64 {
        self.stage.seed
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.stage;
        let b = &mut self.synth;
        match key {
            "labeled_dir" => self.labeled_dir = parse_dir(v),
            "unlabeled_dir" => self.unlabeled_dir = parse_dir(v),
            "val_dir" => self.val_dir = parse_dir(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "window_bottom" => {
                self.window = WindowSpec::new(parse(key, v)?, self.window.top())
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "window_top" => {
                self.window = WindowSpec::new(self.window.bottom(), parse(key, v)?)
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "supervised_only" => self.supervised_only = parse_bool(key, v)?,
            "seed" => s.seed = parse(key, v)?,
            "lr" => s.lr = parse(key, v)?,
            "weight_decay" => s.optimizer.weight_decay = parse(key, v)?,
            "beta1" => s.optimizer.beta1 = parse(key, v)?,
            "beta2" => s.optimizer.beta2 = parse(key, v)?,
            "adam_eps" => s.optimizer.eps = parse(key, v)?,
            "patch" => s.model.patch = parse(key, v)?,
            "hidden1" => s.model.hidden1 = parse(key, v)?,
            "hidden2" => s.model.hidden2 = parse(key, v)?,
            "batch" => s.batch = parse(key, v)?,
            "stage1_epochs" => s.stage1_epochs = parse(key, v)?,
            "stage2_epochs" => s.stage2_epochs = parse(key, v)?,
            "iters_per_epoch" => {
                s.iters_per_epoch = match v {
                    "" | "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "slice_fraction" => s.slice_fraction = parse(key, v)?,
            "stage1_pseudo_count" => s.stage1_pseudo_count = parse(key, v)?,
            "perturb_rate" => s.perturb_rate = parse(key, v)?,
            "strong_views" => s.strong_views = parse(key, v)?,
            "threshold_momentum" => s.threshold_momentum = parse(key, v)?,
            "consistency_weight" => s.consistency_weight = parse(key, v)?,
            "pseudo_weight" => s.pseudo_weight = parse(key, v)?,
            "flip" => s.flip = parse_bool(key, v)?,
            "distance" => s.distance = v.parse()?,
            "fta_lambda" => s.fta.lambda = parse_lambda(v)?,
            "fta_beta" => s.fta.mask_fraction = parse(key, v)?,
            "fta_mode" => s.fta.mode = v.parse()?,
            "synth_seed" => b.seed = parse(key, v)?,
            "synth_dims" => b.dims = parse_dims(v)?,
            "synth_labeled" => b.labeled = parse(key, v)?,
            "synth_unlabeled" => b.unlabeled = parse(key, v)?,
            "synth_val" => b.val = parse(key, v)?,
            "synth_count_min" => b.count_min = parse(key, v)?,
            "synth_count_max" => b.count_max = parse(key, v)?,
            "synth_radius_min" => b.radius_min = parse_triple(key, v)?,
            "synth_radius_max" => b.radius_max = parse_triple(key, v)?,
            "synth_fg_mean" => b.foreground.mean = parse(key, v)?,
            "synth_fg_std" => b.foreground.std = parse(key, v)?,
            "synth_bg_mean" => b.background.mean = parse(key, v)?,
            "synth_bg_std" => b.background.std = parse(key, v)?,
            "synth_shift_gain" => b.target_shift.gain = parse(key, v)?,
            "synth_shift_bias" => b.target_shift.bias = parse(key, v)?,
            "synth_shift_gamma" => b.target_shift.gamma = parse(key, v)?,
            "synth_shift_field" => b.target_shift.field_amplitude = parse(key, v)?,
            "synth_shift_seed" => b.target_shift.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.stage.validate()?;
        self.synth
            .target_shift
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let s = &self.stage;
        let b = &self.synth;
        let dir = |d: &Option<PathBuf>| d.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("labeled_dir", dir(&self.labeled_dir));
        kv("unlabeled_dir", dir(&self.unlabeled_dir));
        kv("val_dir", dir(&self.val_dir));
        kv("out_dir", self.out_dir.display().to_string());
        kv("window_bottom", self.window.bottom().to_string());
        kv("window_top", self.window.top().to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("supervised_only", self.supervised_only.to_string());
        kv("seed", s.seed.to_string());
        kv("lr", s.lr.to_string());
        kv("weight_decay", s.optimizer.weight_decay.to_string());
        kv("beta1", s.optimizer.beta1.to_string());
        kv("beta2", s.optimizer.beta2.to_string());
        kv("adam_eps", s.optimizer.eps.to_string());
        kv("patch", s.model.patch.to_string());
        kv("hidden1", s.model.hidden1.to_string());
        kv("hidden2", s.model.hidden2.to_string());
        kv("batch", s.batch.to_string());
        kv("stage1_epochs", s.stage1_epochs.to_string());
        kv("stage2_epochs", s.stage2_epochs.to_string());
        kv(
            "iters_per_epoch",
            s.iters_per_epoch.map_or_else(|| "auto".into(), |n| n.to_string()),
        );
        kv("slice_fraction", s.slice_fraction.to_string());
        kv("stage1_pseudo_count", s.stage1_pseudo_count.to_string());
        kv("perturb_rate", s.perturb_rate.to_string());
        kv("strong_views", s.strong_views.to_string());
        kv("threshold_momentum", s.threshold_momentum.to_string());
        kv("consistency_weight", s.consistency_weight.to_string());
        kv("pseudo_weight", s.pseudo_weight.to_string());
        kv("flip", s.flip.to_string());
        kv("distance", s.distance.to_string());
        kv("fta_lambda", format_lambda(s.fta.lambda));
        kv("fta_beta", s.fta.mask_fraction.to_string());
        kv("fta_mode", s.fta.mode.to_string());
        kv("synth_seed", b.seed.to_string());
        kv("synth_dims", format!("{}x{}x{}", b.dims.depth, b.dims.height, b.dims.width));
        kv("synth_labeled", b.labeled.to_string());
        kv("synth_unlabeled", b.unlabeled.to_string());
        kv("synth_val", b.val.to_string());
        kv("synth_count_min", b.count_min.to_string());
        kv("synth_count_max", b.count_max.to_string());
        kv("synth_radius_min", format_triple(b.radius_min));
        kv("synth_radius_max", format_triple(b.radius_max));
        kv("synth_fg_mean", b.foreground.mean.to_string());
        kv("synth_fg_std", b.foreground.std.to_string());
        kv("synth_bg_mean", b.background.mean.to_string());
        kv("synth_bg_std", b.background.std.to_string());
        kv("synth_shift_gain", b.target_shift.gain.to_string());
        kv("synth_shift_bias", b.target_shift.bias.to_string());
        kv("synth_shift_gamma", b.target_shift.gamma.to_string());
        kv("synth_shift_field", b.target_shift.field_amplitude.to_string());
        kv("synth_shift_seed", b.target_shift.seed.to_string());
        out
    }
}

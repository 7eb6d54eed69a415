use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ssl::UnlabeledVolume;
use crate::synth::{Benchmark, Case};
use crate::volume::{load_mask, load_volume, save_mask, save_volume};

/// Raw-intensity input to a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<UnlabeledVolume>,
    pub val: Vec<Case>,
}

impl Dataset {
    /// Drops the unlabeled ground truth.
    pub fn from_benchmark(b: Benchmark) -> Result<Self> {
        Ok(Self {
            labeled: b.labeled,
            unlabeled: b
                .unlabeled
                .into_iter()
                .map(|c| UnlabeledVolume {
                    id: c.id,
                    volume: c.volume,
                })
                .collect(),
            val: b.val,
        })
    }
}

const MASK_SUFFIX: &str = "_mask.vol";

/// Sorted `(id, path)` of the volume files in `dir`, masks excluded.
fn volume_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.ends_with(MASK_SUFFIX) {
            continue;
        }
        if let Some(id) = name.strip_suffix(".vol") {
            out.push((id.to_owned(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `<id>.vol` with its `<id>_mask.vol` partner for every scan in `dir`.
pub fn load_cases(dir: &Path) -> Result<Vec<Case>> {
    volume_files(dir)?
        .into_iter()
        .map(|(id, path)| {
            let volume = load_volume(&path)?;
            let mask = load_mask(dir.join(format!("{id}{MASK_SUFFIX}")))?;
            if mask.dims() != volume.dims() {
                return Err(Error::Dimension(format!(
                    "{id}: mask {} does not match volume {}",
                    mask.dims(),
                    volume.dims()
                )));
            }
            Ok(Case { id, volume, mask })
        })
        .collect()
}

pub fn load_unlabeled(dir: &Path) -> Result<Vec<UnlabeledVolume>> {
    volume_files(dir)?
        .into_iter()
        .map(|(id, path)| Ok(UnlabeledVolume { id, volume: load_volume(&path)? }))
        .collect()
}

/// Writes `labeled/`, `unlabeled/` and `val/` plus `manifest.csv` under `out`.
/// Unlabeled scans are written without masks.
pub fn write_benchmark(b: &Benchmark, out: &Path) -> Result<()> {
    let mut manifest = String::from("id,split,volume,mask\n");
    for (split, cases, with_mask) in [
        ("labeled", &b.labeled, true),
        ("unlabeled", &b.unlabeled, false),
        ("val", &b.val, true),
    ] {
        let dir = out.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for c in cases {
            let vol = format!("{split}/{}.vol", c.id);
            save_volume(&c.volume, out.join(&vol))?;
            let mask = if with_mask {
                let m = format!("{split}/{}{MASK_SUFFIX}", c.id);
                save_mask(&c.mask, out.join(&m))?;
                m
            } else {
                String::new()
            };
            manifest.push_str(&format!("{},{split},{vol},{mask}\n", c.id));
        }
    }
    let path = out.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

//! Intensity windowing, three-axis slicing and the train/validation split.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{self, Dims, MaskVolume, ValueUnit, Volume};

pub const DEFAULT_VAL_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    bottom: f32,
    top: f32,
}

impl WindowSpec {
    pub fn new(bottom: f32, top: f32) -> Result<Self> {
        if !(bottom < top) || !bottom.is_finite() || !top.is_finite() {
            return Err(Error::Window { bottom, top });
        }
        Ok(Self { bottom, top })
    }

    pub fn bottom(&self) -> f32 {
        self.bottom
    }

    pub fn top(&self) -> f32 {
        self.top
    }

    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        ((x - self.bottom) / (self.top - self.bottom)).clamp(0.0, 1.0)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            bottom: 500.0,
            top: 2000.0,
        }
    }
}

/// Clamps raw intensities to the window and rescales them onto `[0, 1]`.
pub fn window_normalize(v: &Volume, w: WindowSpec) -> Result<Volume> {
    if v.unit() != ValueUnit::Raw {
        return Err(Error::Input("windowing expects a raw-intensity volume".into()));
    }
    let data = v.data().iter().map(|&x| w.apply(x)).collect();
    Volume::new(v.dims(), data, ValueUnit::Normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn suffix(self) -> &'static str {
        match self {
            Axis::X => "_x",
            Axis::Y => "_y",
            Axis::Z => "_z",
        }
    }

    /// Number of slices a volume yields along this axis.
    pub fn extent(self, dims: Dims) -> usize {
        match self {
            Axis::X => dims.width,
            Axis::Y => dims.height,
            Axis::Z => dims.depth,
        }
    }

    /// `(rows, cols)` of a slice taken along this axis.
    pub fn plane(self, dims: Dims) -> (usize, usize) {
        match self {
            Axis::X => (dims.depth, dims.height),
            Axis::Y => (dims.depth, dims.width),
            Axis::Z => (dims.height, dims.width),
        }
    }

    /// Volume coordinates `(x, y, z)` of pixel `(row, col)` of slice `index`.
    #[inline]
    pub fn voxel(self, index: usize, row: usize, col: usize) -> (usize, usize, usize) {
        match self {
            Axis::X => (index, col, row),
            Axis::Y => (col, index, row),
            Axis::Z => (col, row, index),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.suffix()[1..])
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches('_') {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Format(format!("unknown axis tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub unit: ValueUnit,
    pub axis: Axis,
    pub index: usize,
    pub source_id: String,
}

impl Slice2D {
    /// A free-standing axial slice, mostly useful for tests and augmentation outputs.
    pub fn from_data(height: usize, width: usize, data: Vec<f32>, unit: ValueUnit) -> Result<Self> {
        let s = Self {
            height,
            width,
            data,
            unit,
            axis: Axis::Z,
            index: 0,
            source_id: String::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Dimension("slice needs at least one pixel".into()));
        }
        if self.data.len() != self.height * self.width {
            return Err(Error::Length {
                expected: self.height * self.width,
                found: self.data.len(),
            });
        }
        if self.unit == ValueUnit::Normalized && self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Value("normalized slice holds values outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn file_name(&self) -> String {
        slice_file_name(&self.source_id, self.index, self.axis)
    }

    /// Copy with the same geometry and provenance but new pixel values.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        let unit = if data.iter().all(|v| (0.0..=1.0).contains(v)) {
            self.unit
        } else {
            ValueUnit::Raw
        };
        Self {
            data,
            unit,
            source_id: self.source_id.clone(),
            ..*self
        }
    }

    pub fn to_volume(&self) -> Result<Volume> {
        Volume::new(Dims::new(1, self.height, self.width)?, self.data.clone(), self.unit)
    }
}

/// Binary label plane aligned with a [`Slice2D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSlice {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskSlice {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        MaskVolume::new(Dims::new(1, height, width)?, data.clone())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn to_mask_volume(&self) -> MaskVolume {
        MaskVolume::new(Dims::new(1, self.height, self.width).unwrap(), self.data.clone()).unwrap()
    }
}

pub fn slice_file_name(source_id: &str, index: usize, axis: Axis) -> String {
    format!("{source_id}_{index}{}.vol", axis.suffix())
}

fn extract_plane<T: Copy>(data: &[T], dims: Dims, axis: Axis, index: usize) -> Vec<T> {
    let (rows, cols) = axis.plane(dims);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (x, y, z) = axis.voxel(index, row, col);
            out.push(data[dims.index(x, y, z)]);
        }
    }
    out
}

pub fn extract_slice(v: &Volume, source_id: &str, axis: Axis, index: usize) -> Slice2D {
    let (height, width) = axis.plane(v.dims());
    Slice2D {
        height,
        width,
        data: extract_plane(v.data(), v.dims(), axis, index),
        unit: v.unit(),
        axis,
        index,
        source_id: source_id.to_owned(),
    }
}

pub fn extract_mask_slice(m: &MaskVolume, axis: Axis, index: usize) -> MaskSlice {
    let (height, width) = axis.plane(m.dims());
    MaskSlice {
        height,
        width,
        data: extract_plane(m.data(), m.dims(), axis, index),
    }
}

/// Every plane along x, then y, then z: `W + H + D` slices in total.
pub fn slice_volume(v: &Volume, source_id: &str) -> Vec<Slice2D> {
    Axis::ALL
        .iter()
        .flat_map(|&axis| (0..axis.extent(v.dims())).map(move |i| (axis, i)))
        .map(|(axis, i)| extract_slice(v, source_id, axis, i))
        .collect()
}

/// Mask planes in the same order as [`slice_volume`].
pub fn slice_mask(m: &MaskVolume) -> Vec<MaskSlice> {
    Axis::ALL
        .iter()
        .flat_map(|&axis| (0..axis.extent(m.dims())).map(move |i| (axis, i)))
        .map(|(axis, i)| extract_mask_slice(m, axis, i))
        .collect()
}

/// Reassembles a volume from its axial (`_z`) slices given in index order.
pub fn stack_z_slices(slices: &[Slice2D]) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Input("no slices to stack".into()))?;
    let dims = Dims::new(slices.len(), first.height, first.width)?;
    let mut data = Vec::with_capacity(dims.len());
    for (z, s) in slices.iter().enumerate() {
        if s.axis != Axis::Z || s.index != z || s.height != first.height || s.width != first.width {
            return Err(Error::Input(format!("slice {z} is not the matching axial plane")));
        }
        data.extend_from_slice(&s.data);
    }
    Volume::new(dims, data, first.unit)
}

pub fn save_slice(s: &Slice2D, path: impl AsRef<Path>) -> Result<()> {
    volume::save_volume(&s.to_volume()?, path)
}

/// Loads a single-plane VOL1 file. Provenance is taken from the file name when
/// it follows the `<source>_<index>_<axis>.vol` convention.
pub fn load_slice(path: impl AsRef<Path>, unit: ValueUnit) -> Result<Slice2D> {
    let path = path.as_ref();
    let v = volume::load_volume_as(path, unit)?;
    let dims = v.dims();
    if dims.depth != 1 {
        return Err(Error::Dimension(format!("slice file has depth {}", dims.depth)));
    }
    let (source_id, index, axis) = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(parse_slice_file_name)
        .unwrap_or_else(|| (String::new(), 0, Axis::Z));
    Ok(Slice2D {
        height: dims.height,
        width: dims.width,
        data: v.into_data(),
        unit,
        axis,
        index,
        source_id,
    })
}

pub fn parse_slice_file_name(name: &str) -> Option<(String, usize, Axis)> {
    let stem = name.strip_suffix(".vol")?;
    let (rest, axis) = stem.rsplit_once('_')?;
    let axis = axis.parse().ok()?;
    let (source, index) = rest.rsplit_once('_')?;
    Some((source.to_owned(), index.parse().ok()?, axis))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub axis: Axis,
    pub index: usize,
    pub source_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SliceManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "file,axis,index,source_id,split";

impl SliceManifest {
    /// One `train` entry per slice, in slicing order.
    pub fn for_volume(source_id: &str, dims: Dims) -> Self {
        let mut m = Self::default();
        m.push_volume(source_id, dims);
        m
    }

    pub fn push_volume(&mut self, source_id: &str, dims: Dims) {
        for axis in Axis::ALL {
            for index in 0..axis.extent(dims) {
                self.entries.push(ManifestEntry {
                    file: slice_file_name(source_id, index, axis),
                    axis,
                    index,
                    source_id: source_id.to_owned(),
                    split: Split::Train,
                });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.file, e.axis, e.index, e.source_id, e.split
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(Error::Format("manifest header row missing".into()));
        }
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [file, axis, index, source_id, split] = fields[..] else {
                return Err(Error::Format(format!("manifest row {line:?} needs 5 fields")));
            };
            let axis: Axis = axis.parse()?;
            if !file.trim_end_matches(".vol").ends_with(axis.suffix()) {
                return Err(Error::Format(format!("{file} does not end in {}", axis.suffix())));
            }
            entries.push(ManifestEntry {
                file: file.to_owned(),
                axis,
                index: index
                    .parse()
                    .map_err(|_| Error::Format(format!("bad slice index {index:?}")))?,
                source_id: source_id.to_owned(),
                split: split.parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn check_fraction(val_fraction: f64) -> Result<()> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Input(format!(
            "validation fraction {val_fraction} must lie strictly between 0 and 1"
        )));
    }
    Ok(())
}

/// Marks `floor(val_fraction * N)` slices as validation, chosen by a seeded shuffle.
pub fn split_train_val(manifest: &SliceManifest, val_fraction: f64, seed: u64) -> Result<SliceManifest> {
    check_fraction(val_fraction)?;
    if manifest.is_empty() {
        return Err(Error::Input("cannot split an empty manifest".into()));
    }
    let n = manifest.len();
    let n_val = (val_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut out = manifest.clone();
    for (i, e) in out.entries.iter_mut().enumerate() {
        e.split = if val.contains(&i) { Split::Val } else { Split::Train };
    }
    Ok(out)
}

/// Same as [`split_train_val`] but whole source volumes go to validation, so no
/// volume contributes slices to both sides.
pub fn split_by_source(manifest: &SliceManifest, val_fraction: f64, seed: u64) -> Result<SliceManifest> {
    check_fraction(val_fraction)?;
    if manifest.is_empty() {
        return Err(Error::Input("cannot split an empty manifest".into()));
    }
    let mut sources: Vec<&str> = Vec::new();
    for e in &manifest.entries {
        if !sources.contains(&e.source_id.as_str()) {
            sources.push(&e.source_id);
        }
    }
    let n_val = (val_fraction * sources.len() as f64).floor() as usize;
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: BTreeSet<String> = sources[..n_val].iter().map(|s| s.to_string()).collect();
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = if val.contains(&e.source_id) { Split::Val } else { Split::Train };
    }
    Ok(out)
}

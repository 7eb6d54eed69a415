//! Overlap and distance metrics, and the weighted challenge score.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{to_voxel_set, Dims, MaskVolume, VoxelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreWeights {
    pub dice: f64,
    pub iou: f64,
    pub hd: f64,
}

pub const SCORE_WEIGHTS: ScoreWeights = ScoreWeights {
    dice: 0.4,
    iou: 0.3,
    hd: 0.3,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub iou: f64,
    pub hd_raw: f64,
    pub hd_norm: f64,
    pub score: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "case,dice,iou,hd_raw,hd_norm,score";

    pub fn csv_row(&self, case: &str) -> String {
        format!(
            "{case},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.dice, self.iou, self.hd_raw, self.hd_norm, self.score
        )
    }

    /// Field-wise mean of several reports.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            dice: avg(|r| r.dice),
            iou: avg(|r| r.iou),
            hd_raw: avg(|r| r.hd_raw),
            hd_norm: avg(|r| r.hd_norm),
            score: avg(|r| r.score),
        })
    }
}

/// Which distance feeds the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    /// Symmetric Hausdorff distance with L1 ground metric.
    #[default]
    Hausdorff,
    /// Smallest L1 distance between any predicted and any true voxel.
    MinSeparation,
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hausdorff" => Ok(Self::Hausdorff),
            "min-separation" => Ok(Self::MinSeparation),
            other => Err(Error::Config(format!("unknown distance kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hausdorff => "hausdorff",
            Self::MinSeparation => "min-separation",
        })
    }
}

struct Overlap {
    a: usize,
    b: usize,
    both: usize,
}

fn overlap(a: &MaskVolume, b: &MaskVolume) -> Result<Overlap> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "mask dims differ: {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    let mut o = Overlap { a: 0, b: 0, both: 0 };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        o.a += x as usize;
        o.b += y as usize;
        o.both += (x & y) as usize;
    }
    Ok(o)
}

/// `2 |A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let o = overlap(a, b)?;
    if o.a + o.b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * o.both as f64 / (o.a + o.b) as f64)
}

/// `|A n B| / |A u B|`; two empty masks score 1.
pub fn iou(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    let o = overlap(a, b)?;
    let union = o.a + o.b - o.both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(o.both as f64 / union as f64)
}

fn common_bounds(a: &VoxelSet, b: &VoxelSet) -> Dims {
    let (p, q) = (a.bounds(), b.bounds());
    Dims {
        depth: p.depth.max(q.depth),
        height: p.height.max(q.height),
        width: p.width.max(q.width),
    }
}

/// Exact L1 distance from every grid voxel to the nearest member of `set`,
/// by breadth-first search over the 6-neighbourhood.
fn l1_distance_map(set: &VoxelSet, dims: Dims) -> Vec<u32> {
    let mut dist = vec![u32::MAX; dims.len()];
    let mut queue = VecDeque::with_capacity(dims.len());
    for c in set.coords() {
        let i = dims.index(c[0], c[1], c[2]);
        dist[i] = 0;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        let [x, y, z] = dims.coords(i);
        let next = dist[i] + 1;
        let mut visit = |j: usize| {
            if dist[j] == u32::MAX {
                dist[j] = next;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < dims.width {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - dims.width);
        }
        if y + 1 < dims.height {
            visit(i + dims.width);
        }
        if z > 0 {
            visit(i - dims.width * dims.height);
        }
        if z + 1 < dims.depth {
            visit(i + dims.width * dims.height);
        }
    }
    dist
}

fn nearest_distances<'a>(from: &'a VoxelSet, to: &VoxelSet, dims: Dims) -> impl Iterator<Item = u32> + 'a {
    let map = l1_distance_map(to, dims);
    from.coords()
        .iter()
        .map(move |c| map[dims.index(c[0], c[1], c[2])])
}

fn require_nonempty(a: &VoxelSet, b: &VoxelSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("distance between voxel sets needs both sets nonempty"));
    }
    Ok(())
}

/// `min |x1 - x2| + |y1 - y2| + |z1 - z2|` over all cross pairs.
pub fn min_l1_separation(a: &VoxelSet, b: &VoxelSet) -> Result<usize> {
    require_nonempty(a, b)?;
    let dims = common_bounds(a, b);
    Ok(nearest_distances(a, b, dims).min().unwrap() as usize)
}

/// Symmetric Hausdorff distance under the L1 metric.
pub fn hausdorff_l1(a: &VoxelSet, b: &VoxelSet) -> Result<usize> {
    require_nonempty(a, b)?;
    let dims = common_bounds(a, b);
    let ab = nearest_distances(a, b, dims).max().unwrap();
    let ba = nearest_distances(b, a, dims).max().unwrap();
    Ok(ab.max(ba) as usize)
}

/// Scales a distance by the largest L1 extent of the grid, clamped to `[0, 1]`.
pub fn normalize_hd(hd_raw: f64, dims: Dims) -> Result<f64> {
    if !(hd_raw >= 0.0) {
        return Err(Error::Input(format!("distance {hd_raw} is negative")));
    }
    let extent = dims.max_l1_extent();
    if extent == 0 {
        return if hd_raw == 0.0 {
            Ok(0.0)
        } else {
            Err(Error::Normalization(hd_raw))
        };
    }
    Ok((hd_raw / extent as f64).clamp(0.0, 1.0))
}

pub fn challenge_score(dice: f64, iou: f64, hd_norm: f64) -> Result<f64> {
    for (name, v) in [("dice", dice), ("iou", iou), ("hd_norm", hd_norm)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let w = SCORE_WEIGHTS;
    Ok(w.dice * dice + w.iou * iou + w.hd * (1.0 - hd_norm))
}

/// Full report for one prediction. Two empty masks give distance 0; when only
/// one mask is empty the distance is taken as the full grid extent.
pub fn evaluate(pred: &MaskVolume, gt: &MaskVolume, kind: DistanceKind) -> Result<MetricsReport> {
    let dice = dice(pred, gt)?;
    let iou = iou(pred, gt)?;
    let (a, b) = (to_voxel_set(pred), to_voxel_set(gt));
    let dims = pred.dims();
    let (hd_raw, hd_norm) = match (a.is_empty(), b.is_empty()) {
        (true, true) => (0.0, 0.0),
        (true, false) | (false, true) => (dims.max_l1_extent() as f64, 1.0),
        (false, false) => {
            let d = match kind {
                DistanceKind::Hausdorff => hausdorff_l1(&a, &b)?,
                DistanceKind::MinSeparation => min_l1_separation(&a, &b)?,
            } as f64;
            (d, normalize_hd(d, dims)?)
        }
    };
    Ok(MetricsReport {
        dice,
        iou,
        hd_raw,
        hd_norm,
        score: challenge_score(dice, iou, hd_norm)?,
    })
}

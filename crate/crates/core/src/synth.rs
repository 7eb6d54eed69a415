//! Seeded ellipsoid phantoms and an acquisition-shift simulator.
//!
//! Phantoms stand in for scans: bright non-overlapping ellipsoids ("teeth")
//! on a darker background, with exact analytic ground truth.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Dims, MaskVolume, ValueUnit, Volume};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intensity {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub count: usize,
    /// Per-axis `(x, y, z)` radius bounds in voxels.
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    pub foreground: Intensity,
    pub background: Intensity,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let extent = [self.dims.width, self.dims.height, self.dims.depth];
        for a in 0..3 {
            let (lo, hi) = (self.radius_min[a], self.radius_max[a]);
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("radius range {lo}..{hi} on axis {a} is invalid")));
            }
            if 2.0 * hi.ceil() + 1.0 > extent[a] as f64 {
                return Err(Error::Config(format!(
                    "radius {hi} does not fit an axis of {} voxels",
                    extent[a]
                )));
            }
        }
        if self.foreground.std < 0.0 || self.background.std < 0.0 {
            return Err(Error::Config("intensity stddev must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [usize; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a] as f64) / self.radii[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    fn separated_from(&self, other: &Ellipsoid) -> bool {
        let d2: f64 = (0..3)
            .map(|a| (self.center[a] as f64 - other.center[a] as f64).powi(2))
            .sum();
        d2.sqrt() > self.bounding_radius() + other.bounding_radius()
    }
}

fn place_ellipsoids(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipsoid>> {
    let extent = [spec.dims.width, spec.dims.height, spec.dims.depth];
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while placed.len() < spec.count {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                placed: placed.len(),
                requested: spec.count,
                attempts,
            });
        }
        attempts += 1;
        let mut radii = [0.0; 3];
        let mut center = [0; 3];
        for a in 0..3 {
            radii[a] = rng.random_range(spec.radius_min[a]..=spec.radius_max[a]);
            let margin = radii[a].ceil() as usize;
            center[a] = rng.random_range(margin..=extent[a] - 1 - margin);
        }
        let e = Ellipsoid { center, radii };
        if placed.iter().all(|p| p.separated_from(&e)) {
            placed.push(e);
        }
    }
    Ok(placed)
}

/// Phantom volume, its exact mask, and the ellipsoids used.
pub fn gen_phantom_with_layout(spec: &PhantomSpec) -> Result<(Volume, MaskVolume, Vec<Ellipsoid>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = place_ellipsoids(spec, &mut rng)?;
    let dims = spec.dims;
    let mut mask = vec![0u8; dims.len()];
    for e in &shapes {
        let lo: Vec<usize> = (0..3).map(|a| e.center[a] - e.radii[a].floor() as usize).collect();
        let hi: Vec<usize> = (0..3).map(|a| e.center[a] + e.radii[a].floor() as usize).collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if e.contains(x, y, z) {
                        mask[dims.index(x, y, z)] = 1;
                    }
                }
            }
        }
    }
    let fg = Normal::new(0.0, spec.foreground.std).unwrap();
    let bg = Normal::new(0.0, spec.background.std).unwrap();
    let data = mask
        .iter()
        .map(|&m| {
            let v = if m == 1 {
                spec.foreground.mean + fg.sample(&mut rng)
            } else {
                spec.background.mean + bg.sample(&mut rng)
            };
            v as f32
        })
        .collect();
    Ok((
        Volume::new(dims, data, ValueUnit::Raw)?,
        MaskVolume::new(dims, mask)?,
        shapes,
    ))
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<(Volume, MaskVolume)> {
    gen_phantom_with_layout(spec).map(|(v, m, _)| (v, m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    pub gain: f64,
    pub bias: f64,
    pub gamma: f64,
    pub field_amplitude: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub const IDENTITY: ShiftSpec = ShiftSpec {
        gain: 1.0,
        bias: 0.0,
        gamma: 1.0,
        field_amplitude: 0.0,
        seed: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "shift gain and gamma must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

const FIELD_WAVES: usize = 3;

/// Smooth seeded field bounded by `amplitude` in absolute value: a weighted
/// sum of a few plane waves of at most 0.45 cycles across the longest axis.
pub fn bias_field(dims: Dims, amplitude: f64, seed: u64) -> Vec<f64> {
    if amplitude == 0.0 {
        return vec![0.0; dims.len()];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let longest = dims.depth.max(dims.height).max(dims.width) as f64;
    let mut waves = Vec::with_capacity(FIELD_WAVES);
    let mut weight_sum = 0.0;
    for _ in 0..FIELD_WAVES {
        // Uniform direction on the sphere.
        let cz: f64 = rng.random_range(-1.0..=1.0);
        let az: f64 = rng.random_range(0.0..2.0 * PI);
        let r = (1.0 - cz * cz).sqrt();
        let cycles: f64 = rng.random_range(0.2..=0.45);
        let k = 2.0 * PI * cycles / longest;
        let dir = [r * az.cos() * k, r * az.sin() * k, cz * k];
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let weight: f64 = rng.random_range(0.5..=1.0);
        weight_sum += weight;
        waves.push((dir, phase, weight));
    }
    let mut field = Vec::with_capacity(dims.len());
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let p = [x as f64, y as f64, z as f64];
                let v: f64 = waves
                    .iter()
                    .map(|(k, phase, w)| w * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
                    .sum();
                field.push(amplitude * v / weight_sum);
            }
        }
    }
    field
}

/// `gain * v^gamma + bias + field`, with the power taken sign-preserving.
pub fn apply_domain_shift(v: &Volume, s: &ShiftSpec) -> Result<Volume> {
    s.validate()?;
    if v.unit() != ValueUnit::Raw {
        return Err(Error::Input("domain shift expects raw intensities".into()));
    }
    let field = bias_field(v.dims(), s.field_amplitude, s.seed);
    let data = v
        .data()
        .iter()
        .zip(&field)
        .map(|(&x, &f)| {
            let x = x as f64;
            let powered = if s.gamma == 1.0 {
                x
            } else {
                x.signum() * x.abs().powf(s.gamma)
            };
            (s.gain * powered + s.bias + f) as f32
        })
        .collect();
    Volume::new(v.dims(), data, ValueUnit::Raw)
}

/// A generated scan with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub mask: MaskVolume,
}

/// Labeled source-domain cases plus unlabeled and validation cases from a
/// shifted target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub dims: Dims,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    pub foreground: Intensity,
    pub background: Intensity,
    pub target_shift: ShiftSpec,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            dims: Dims {
                depth: 32,
                height: 32,
                width: 32,
            },
            labeled: 12,
            unlabeled: 40,
            val: 10,
            count_min: 3,
            count_max: 6,
            radius_min: [2.5, 2.5, 3.0],
            radius_max: [4.5, 4.5, 6.0],
            foreground: Intensity {
                mean: 1500.0,
                std: 120.0,
            },
            background: Intensity {
                mean: 400.0,
                std: 150.0,
            },
            target_shift: ShiftSpec {
                gain: 0.75,
                bias: 475.0,
                gamma: 1.0,
                field_amplitude: 175.0,
                seed: 0,
            },
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<Case>,
    pub val: Vec<Case>,
}

fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 16);
    rng.random()
}

impl BenchmarkSpec {
    fn phantom(&self, seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PhantomSpec {
            dims: self.dims,
            count: rng.random_range(self.count_min..=self.count_max),
            radius_min: self.radius_min,
            radius_max: self.radius_max,
            foreground: self.foreground,
            background: self.background,
            seed: rng.random(),
        }
    }

    pub fn generate(&self) -> Result<Benchmark> {
        if self.count_min > self.count_max {
            return Err(Error::Config("count_min exceeds count_max".into()));
        }
        let make = |stream: u64, n: usize, prefix: &str, shifted: bool| -> Result<Vec<Case>> {
            (0..n)
                .map(|i| {
                    let seed = mix_seed(self.seed, stream, i as u64);
                    let (mut volume, mask) = gen_phantom(&self.phantom(seed))?;
                    if shifted {
                        let shift = ShiftSpec {
                            seed: mix_seed(self.target_shift.seed ^ seed, 9, i as u64),
                            ..self.target_shift
                        };
                        volume = apply_domain_shift(&volume, &shift)?;
                    }
                    Ok(Case {
                        id: format!("{prefix}_{i:03}"),
                        volume,
                        mask,
                    })
                })
                .collect()
        };
        Ok(Benchmark {
            labeled: make(1, self.labeled, "lab", false)?,
            unlabeled: make(2, self.unlabeled, "unl", true)?,
            val: make(3, self.val, "val", true)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize) -> PhantomSpec {
        PhantomSpec {
            dims: Dims::new(9, 9, 9).unwrap(),
            count,
            radius_min: [2.0; 3],
            radius_max: [2.0; 3],
            foreground: Intensity { mean: 1000.0, std: 0.0 },
            background: Intensity { mean: 100.0, std: 0.0 },
            seed: 3,
        }
    }

    #[test]
    fn no_ellipsoids_gives_empty_mask() {
        let (_, m) = gen_phantom(&spec(0)).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn radius_two_ball_has_33_voxels() {
        let (v, m) = gen_phantom(&spec(1)).unwrap();
        assert_eq!(m.count(), 33);
        for (x, &l) in v.data().iter().zip(m.data()) {
            assert_eq!(*x, if l == 1 { 1000.0 } else { 100.0 });
        }
    }

    #[test]
    fn overcrowded_spec_fails_placement() {
        assert!(matches!(gen_phantom(&spec(30)), Err(Error::Placement { .. })));
    }

    #[test]
    fn oversized_radius_rejected() {
        let mut s = spec(1);
        s.radius_max = [5.0; 3];
        assert!(matches!(gen_phantom(&s), Err(Error::Config(_))));
    }

    #[test]
    fn identity_shift_and_linearity() {
        let mut s = spec(1);
        s.background.std = 10.0;
        let (v, _) = gen_phantom(&s).unwrap();
        assert_eq!(apply_domain_shift(&v, &ShiftSpec::IDENTITY).unwrap(), v);
        let doubled = apply_domain_shift(&v, &ShiftSpec { gain: 2.0, ..ShiftSpec::IDENTITY }).unwrap();
        assert!((doubled.mean() - 2.0 * v.mean()).abs() < 1e-9 * v.mean().abs());
        assert!(apply_domain_shift(&v, &ShiftSpec { gamma: 0.0, ..ShiftSpec::IDENTITY }).is_err());
    }

    #[test]
    fn field_is_bounded() {
        let dims = Dims::new(6, 7, 8).unwrap();
        let f = bias_field(dims, 50.0, 1);
        assert!(f.iter().all(|v| v.abs() <= 50.0 + 1e-9));
        assert!(f.iter().any(|v| v.abs() > 1.0));
    }

    #[test]
    fn benchmark_sizes() {
        let spec = BenchmarkSpec {
            dims: Dims::new(16, 16, 16).unwrap(),
            labeled: 2,
            unlabeled: 3,
            val: 1,
            radius_min: [2.0; 3],
            radius_max: [3.0; 3],
            count_max: 3,
            ..BenchmarkSpec::default()
        };
        let b = spec.generate().unwrap();
        assert_eq!((b.labeled.len(), b.unlabeled.len(), b.val.len()), (2, 3, 1));
        assert_eq!(b, spec.generate().unwrap());
        assert_eq!(b.labeled[1].id, "lab_001");
    }
}

//! Fourier-domain amplitude mixing between a labeled and an unlabeled slice.
//!
//! Spectra are kept center-shifted: the DC bin sits at `(H / 2, W / 2)`
//! (integer division), so low frequencies occupy the middle of the grid.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::preprocess::Slice2D;
use crate::volume::ValueUnit;

/// Reconstructions with a larger imaginary part are rejected.
pub const MAX_IMAGINARY_RESIDUE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPair {
    pub height: usize,
    pub width: usize,
    /// Modulus, row-major in the shifted layout.
    pub amplitude: Vec<f64>,
    /// Argument in `(-pi, pi]`, same layout as `amplitude`.
    pub phase: Vec<f64>,
}

impl SpectrumPair {
    pub fn dc_index(&self) -> usize {
        (self.height / 2) * self.width + self.width / 2
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if n == 0 {
            return Err(Error::Dimension("empty spectrum".into()));
        }
        if self.amplitude.len() != n || self.phase.len() != n {
            return Err(Error::Length {
                expected: n,
                found: self.amplitude.len().min(self.phase.len()),
            });
        }
        if self.amplitude.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Value("amplitude must be finite and non-negative".into()));
        }
        if self.phase.iter().any(|p| !p.is_finite()) {
            return Err(Error::Value("phase must be finite".into()));
        }
        Ok(())
    }
}

/// Index of the frequency `-k` for shifted index `s` along an axis of length `n`.
#[inline]
pub fn mirror_index(s: usize, n: usize) -> usize {
    let c = n / 2;
    let k = (s + n - c) % n;
    ((n - k) % n + c) % n
}

#[inline]
fn shift_index(r: usize, n: usize) -> usize {
    (r + n / 2) % n
}

#[inline]
fn unshift_index(s: usize, n: usize) -> usize {
    (s + n - n / 2) % n
}

fn fft2_in_place(buf: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::default(); height];
    for c in 0..width {
        for r in 0..height {
            column[r] = buf[r * width + c];
        }
        col_fft.process(&mut column);
        for r in 0..height {
            buf[r * width + c] = column[r];
        }
    }
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Unnormalized forward 2D DFT, returned as center-shifted amplitude and phase.
///
/// The input is real, so the spectrum is projected onto its Hermitian part
/// `(F(k) + conj F(-k)) / 2`. This only removes rounding noise, and makes the
/// amplitude exactly symmetric and the phase exactly antisymmetric.
pub fn dft2_forward(s: &Slice2D) -> SpectrumPair {
    let (h, w) = (s.height, s.width);
    let mut buf: Vec<Complex<f64>> = s.data.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);

    let mut amplitude = vec![0.0; h * w];
    let mut phase = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let f = buf[r * w + c];
            let g = buf[((h - r) % h) * w + (w - c) % w].conj();
            let z = (f + g) * 0.5;
            let at = shift_index(r, h) * w + shift_index(c, w);
            amplitude[at] = z.norm();
            phase[at] = wrap_phase(z.arg());
        }
    }
    SpectrumPair {
        height: h,
        width: w,
        amplitude,
        phase,
    }
}

/// Inverse 2D DFT with `1 / (H W)` normalization. Returns the real part and
/// the largest absolute imaginary component.
pub fn dft2_inverse_with_residue(sp: &SpectrumPair) -> Result<(Vec<f64>, f64)> {
    sp.validate()?;
    let (h, w) = (sp.height, sp.width);
    let mut buf = vec![Complex::default(); h * w];
    for sr in 0..h {
        for sc in 0..w {
            let at = sr * w + sc;
            let z = Complex::from_polar(sp.amplitude[at], sp.phase[at]);
            buf[unshift_index(sr, h) * w + unshift_index(sc, w)] = z;
        }
    }
    fft2_in_place(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut residue = 0.0f64;
    let real = buf
        .iter()
        .map(|z| {
            residue = residue.max((z.im * scale).abs());
            z.re * scale
        })
        .collect();
    if residue >= MAX_IMAGINARY_RESIDUE {
        return Err(Error::Reconstruction(residue));
    }
    Ok((real, residue))
}

pub fn dft2_inverse(sp: &SpectrumPair) -> Result<Slice2D> {
    let (real, _) = dft2_inverse_with_residue(sp)?;
    Slice2D::from_data(
        sp.height,
        sp.width,
        real.into_iter().map(|v| v as f32).collect(),
        ValueUnit::Raw,
    )
}

fn centered_range(n: usize, beta: f64) -> std::ops::Range<usize> {
    let side = ((beta * n as f64).round() as usize).min(n);
    let start = n / 2 - side / 2;
    start..start + side
}

/// Centered rectangle of ones with sides `round(beta * h) x round(beta * w)`.
pub fn make_center_mask(h: usize, w: usize, beta: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Input(format!("mask fraction {beta} outside [0, 1]")));
    }
    let rows = centered_range(h, beta);
    let cols = centered_range(w, beta);
    let mut mask = vec![0u8; h * w];
    for r in rows {
        for c in cols.clone() {
            mask[r * w + c] = 1;
        }
    }
    Ok(mask)
}

/// Closes a shifted-layout mask under `k -> -k`. Even-sided rectangles are
/// not symmetric about the DC bin; blending with their closure keeps the
/// mixed spectrum Hermitian.
pub fn symmetrize_mask(mask: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = mask.to_vec();
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] == 1 {
                out[mirror_index(r, h) * w + mirror_index(c, w)] = 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    /// `(1 - l) A_self (1 - M) + l A_other M`
    PaperLiteral,
    /// `A_self (1 - M) + ((1 - l) A_self + l A_other) M`
    StandardFda,
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(Self::PaperLiteral),
            "standard-fda" => Ok(Self::StandardFda),
            other => Err(Error::Config(format!("unknown blend mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BlendMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PaperLiteral => "paper-literal",
            Self::StandardFda => "standard-fda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaPolicy {
    Fixed(f64),
    /// Drawn uniformly from `[0, max]` on every call.
    Uniform { max: f64 },
}

impl LambdaPolicy {
    fn draw(&self, seed: u64) -> f64 {
        match *self {
            LambdaPolicy::Fixed(l) => l,
            LambdaPolicy::Uniform { max } => {
                if max == 0.0 {
                    0.0
                } else {
                    ChaCha8Rng::seed_from_u64(seed).random_range(0.0..=max)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FtaConfig {
    pub lambda: LambdaPolicy,
    pub mask_fraction: f64,
    pub mode: BlendMode,
    pub seed: u64,
}

impl Default for FtaConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaPolicy::Uniform { max: 1.0 },
            mask_fraction: 0.1,
            mode: BlendMode::PaperLiteral,
            seed: 0,
        }
    }
}

impl FtaConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let lambda_ok = match self.lambda {
            LambdaPolicy::Fixed(l) => in_unit(l),
            LambdaPolicy::Uniform { max } => in_unit(max),
        };
        if !lambda_ok || !in_unit(self.mask_fraction) {
            return Err(Error::Config(format!(
                "mixing ratios must lie in [0, 1]: {:?}, mask fraction {}",
                self.lambda, self.mask_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub z_w: Slice2D,
    pub z_u: Slice2D,
    pub lambda_used: f64,
    pub mask_fraction_used: f64,
    /// Largest imaginary component seen while reconstructing either image.
    pub residue: f64,
}

#[inline]
fn blend(own: f64, other: f64, m: f64, lambda: f64, mode: BlendMode) -> f64 {
    match mode {
        BlendMode::PaperLiteral => (1.0 - lambda) * own * (1.0 - m) + lambda * other * m,
        BlendMode::StandardFda => own * (1.0 - m) + ((1.0 - lambda) * own + lambda * other) * m,
    }
}

pub fn blend_amplitudes(own: &[f64], other: &[f64], mask: &[u8], lambda: f64, mode: BlendMode) -> Vec<f64> {
    own.iter()
        .zip(other)
        .zip(mask)
        .map(|((&a, &b), &m)| blend(a, b, m as f64, lambda, mode))
        .collect()
}

/// Exchanges low-frequency amplitude between `x_w` and `x_u` in both
/// directions. Each output keeps its own image's phase.
pub fn fta_augment_pair(x_w: &Slice2D, x_u: &Slice2D, cfg: &FtaConfig) -> Result<AugmentedPair> {
    cfg.validate()?;
    if (x_w.height, x_w.width) != (x_u.height, x_u.width) {
        return Err(Error::Input(format!(
            "slice shapes differ: {}x{} vs {}x{}",
            x_w.height, x_w.width, x_u.height, x_u.width
        )));
    }
    for s in [x_w, x_u] {
        s.validate()?;
        if s.unit != ValueUnit::Normalized {
            return Err(Error::Input("amplitude mixing expects normalized slices".into()));
        }
    }
    let (h, w) = (x_w.height, x_w.width);
    let lambda = cfg.lambda.draw(cfg.seed);
    let mask = symmetrize_mask(&make_center_mask(h, w, cfg.mask_fraction)?, h, w);

    let spec_w = dft2_forward(x_w);
    let spec_u = dft2_forward(x_u);
    let mix = |own: &SpectrumPair, other: &SpectrumPair| SpectrumPair {
        height: h,
        width: w,
        amplitude: blend_amplitudes(&own.amplitude, &other.amplitude, &mask, lambda, cfg.mode),
        phase: own.phase.clone(),
    };
    let (z_w, res_w) = dft2_inverse_with_residue(&mix(&spec_w, &spec_u))?;
    let (z_u, res_u) = dft2_inverse_with_residue(&mix(&spec_u, &spec_w))?;
    let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok(AugmentedPair {
        z_w: x_w.with_data(to_f32(z_w)),
        z_u: x_u.with_data(to_f32(z_u)),
        lambda_used: lambda,
        mask_fraction_used: cfg.mask_fraction,
        residue: res_w.max(res_u),
    })
}

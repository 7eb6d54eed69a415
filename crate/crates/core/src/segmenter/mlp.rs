use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::perturb::{dropout_rng, AlphaDropout, SELU_ALPHA, SELU_LAMBDA};
use super::{check_finite, Example, Perturbation, Segmenter, PROB_EPS};
use crate::error::{Error, Result};
use crate::preprocess::Slice2D;

/// Patch size and hidden widths of a [`PatchMlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub patch: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            patch: 5,
            hidden1: 32,
            hidden2: 16,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::Config(format!(
                "patch side must be odd and hidden widths positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.patch * self.patch
    }

    pub fn param_count(&self) -> usize {
        let (k, h1, h2) = (self.inputs(), self.hidden1, self.hidden2);
        h1 * k + h1 + h2 * h1 + h2 + h2 + 1
    }

    fn offsets(&self) -> Offsets {
        let (k, h1, h2) = (self.inputs(), self.hidden1, self.hidden2);
        let w1 = 0;
        let b1 = w1 + h1 * k;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + h2;
        Offsets { w1, b1, w2, b2, w3, b3 }
    }
}

#[derive(Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Per-pixel classifier over a `k x k` reflect-padded neighbourhood:
/// two SELU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMlp {
    shape: ModelShape,
    params: Vec<f64>,
}

#[inline]
fn selu(z: f64) -> f64 {
    if z > 0.0 {
        SELU_LAMBDA * z
    } else {
        SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0)
    }
}

#[inline]
fn selu_grad(z: f64, out: f64) -> f64 {
    if z > 0.0 {
        SELU_LAMBDA
    } else {
        out + SELU_LAMBDA * SELU_ALPHA
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Index at position `i` of an axis of length `n` mirrored about its edges
/// (the edge sample itself is not repeated).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

struct Scratch {
    patch: Vec<f64>,
    pre1: Vec<f64>,
    h1: Vec<f64>,
    keep: Vec<bool>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    d2: Vec<f64>,
}

impl Scratch {
    fn new(shape: &ModelShape) -> Self {
        Self {
            patch: vec![0.0; shape.inputs()],
            pre1: vec![0.0; shape.hidden1],
            h1: vec![0.0; shape.hidden1],
            keep: vec![true; shape.hidden1],
            pre2: vec![0.0; shape.hidden2],
            h2: vec![0.0; shape.hidden2],
            d2: vec![0.0; shape.hidden2],
        }
    }
}

/// Reflect-padded neighbourhood gather for every pixel of a slice.
struct PatchIndex {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

impl PatchIndex {
    fn new(slice: &Slice2D, patch: usize) -> Self {
        let r = (patch / 2) as isize;
        let table = |n: usize| {
            (0..n)
                .map(|p| (-r..=r).map(|d| reflect(p as isize + d, n)).collect())
                .collect()
        };
        Self {
            rows: table(slice.height),
            cols: table(slice.width),
        }
    }

    #[inline]
    fn gather(&self, slice: &Slice2D, row: usize, col: usize, out: &mut [f64]) {
        let mut i = 0;
        for &rr in &self.rows[row] {
            let base = rr * slice.width;
            for &cc in &self.cols[col] {
                out[i] = slice.data[base + cc] as f64;
                i += 1;
            }
        }
    }
}

impl PatchMlp {
    /// LeCun-normal weights (the SELU initialization), zero biases.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.param_count()];
        let o = shape.offsets();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        };
        fill(o.w1..o.b1, shape.inputs());
        fill(o.w2..o.b2, shape.hidden1);
        fill(o.w3..o.b3, shape.hidden2);
        Ok(Self { shape, params })
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(Error::Length {
                expected: shape.param_count(),
                found: params.len(),
            });
        }
        check_finite(&params, "param")?;
        Ok(Self { shape, params })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        Self::from_params(shape, vec![0.0; shape.param_count()])
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    /// Rounds every parameter through `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    /// Forward pass for one pixel whose patch is already in `s.patch`;
    /// returns the output logit. `keep` must be filled when `drop` is set.
    #[inline]
    fn forward_pixel(&self, s: &mut Scratch, drop: Option<&AlphaDropout>) -> f64 {
        let o = self.shape.offsets();
        let k = self.shape.inputs();
        let p = &self.params;
        for j in 0..self.shape.hidden1 {
            let row = &p[o.w1 + j * k..o.w1 + (j + 1) * k];
            let z = p[o.b1 + j] + dot(row, &s.patch);
            s.pre1[j] = z;
            let a = selu(z);
            s.h1[j] = match drop {
                Some(d) => d.apply(a, s.keep[j]),
                None => a,
            };
        }
        let h1n = self.shape.hidden1;
        for j in 0..self.shape.hidden2 {
            let row = &p[o.w2 + j * h1n..o.w2 + (j + 1) * h1n];
            let z = p[o.b2 + j] + dot(row, &s.h1);
            s.pre2[j] = z;
            s.h2[j] = selu(z);
        }
        p[o.b3] + dot(&p[o.w3..o.b3], &s.h2)
    }

    fn run(
        &self,
        slice: &Slice2D,
        perturb: Option<Perturbation>,
        mut per_pixel: impl FnMut(usize, f64, &mut Scratch, Option<&AlphaDropout>),
    ) -> Result<()> {
        slice.validate()?;
        check_finite(&self.params, "param")?;
        let drop = perturb.map(|p| AlphaDropout::new(p.rate));
        let mut rng = dropout_rng(perturb.map(|p| p.seed).unwrap_or(0));
        let index = PatchIndex::new(slice, self.shape.patch);
        let mut s = Scratch::new(&self.shape);
        for row in 0..slice.height {
            for col in 0..slice.width {
                if let Some(d) = &drop {
                    for k in s.keep.iter_mut() {
                        *k = d.keep(&mut rng);
                    }
                }
                index.gather(slice, row, col, &mut s.patch);
                let logit = self.forward_pixel(&mut s, drop.as_ref());
                per_pixel(row * slice.width + col, logit, &mut s, drop.as_ref());
            }
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Segmenter for PatchMlp {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn predict_probs(&self, slice: &Slice2D) -> Result<Vec<f64>> {
        self.predict_probs_perturbed(slice, None)
    }

    fn predict_probs_perturbed(&self, slice: &Slice2D, perturb: Option<Perturbation>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; slice.height * slice.width];
        self.run(slice, perturb, |i, logit, _, _| out[i] = sigmoid(logit))?;
        Ok(out)
    }

    fn accumulate_gradient(&self, ex: &Example<'_>, grad: &mut [f64]) -> Result<f64> {
        let n = ex.input.height * ex.input.width;
        if ex.targets.len() != n || ex.weights.len() != n {
            return Err(Error::Input(format!(
                "{n} pixels but {} targets and {} weights",
                ex.targets.len(),
                ex.weights.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Length {
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        let o = self.shape.offsets();
        let (k, h1n, h2n) = (self.shape.inputs(), self.shape.hidden1, self.shape.hidden2);
        let p = &self.params;
        let mut loss = 0.0;
        // Pixels with zero weight still consume dropout draws so the
        // perturbation pattern matches predict_probs_perturbed.
        self.run(ex.input, ex.perturb, |i, logit, s, drop| {
            let w = ex.weights[i];
            if w == 0.0 {
                return;
            }
            let y = ex.targets[i] as f64;
            let prob = sigmoid(logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss += w * -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln());
            let dz3 = w * (prob - y);

            grad[o.b3] += dz3;
            for j in 0..h2n {
                grad[o.w3 + j] += dz3 * s.h2[j];
                s.d2[j] = dz3 * p[o.w3 + j] * selu_grad(s.pre2[j], s.h2[j]);
            }
            for j in 0..h2n {
                let d = s.d2[j];
                grad[o.b2 + j] += d;
                let g = &mut grad[o.w2 + j * h1n..o.w2 + (j + 1) * h1n];
                for (gl, hl) in g.iter_mut().zip(&s.h1) {
                    *gl += d * hl;
                }
            }
            for l in 0..h1n {
                let mut dh = 0.0;
                for j in 0..h2n {
                    dh += s.d2[j] * p[o.w2 + j * h1n + l];
                }
                let (pre, post) = match drop {
                    Some(d) => {
                        if !s.keep[l] {
                            continue;
                        }
                        dh *= d.scale;
                        let z = s.pre1[l];
                        (z, selu(z))
                    }
                    None => (s.pre1[l], s.h1[l]),
                };
                let d1 = dh * selu_grad(pre, post);
                grad[o.b1 + l] += d1;
                let g = &mut grad[o.w1 + l * k..o.w1 + (l + 1) * k];
                for (gq, xq) in g.iter_mut().zip(&s.patch) {
                    *gq += d1 * xq;
                }
            }
        })?;
        Ok(loss)
    }
}

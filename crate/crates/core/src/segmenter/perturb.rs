use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Alpha dropout: dropped units are set to the SELU negative saturation
/// value, then an affine map restores zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaDropout {
    pub rate: f64,
    /// Multiplier applied after dropping.
    pub scale: f64,
    /// Offset applied after scaling.
    pub shift: f64,
}

impl AlphaDropout {
    /// Value a dropped unit takes before the affine correction.
    pub const SATURATION: f64 = -SELU_LAMBDA * SELU_ALPHA;

    pub fn new(rate: f64) -> Self {
        let s = Self::SATURATION;
        let scale = ((1.0 - rate) * (1.0 + rate * s * s)).powf(-0.5);
        let shift = -scale * s * rate;
        Self { rate, scale, shift }
    }

    #[inline]
    pub fn keep(&self, rng: &mut ChaCha8Rng) -> bool {
        rng.random::<f64>() >= self.rate
    }

    #[inline]
    pub fn apply(&self, x: f64, keep: bool) -> f64 {
        let v = if keep { x } else { Self::SATURATION };
        self.scale * v + self.shift
    }
}

pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Applies seeded alpha dropout to a flat activation buffer.
pub fn alpha_dropout(activations: &[f64], rate: f64, seed: u64) -> Vec<f64> {
    let drop = AlphaDropout::new(rate);
    let mut rng = dropout_rng(seed);
    activations
        .iter()
        .map(|&x| {
            let keep = drop.keep(&mut rng);
            drop.apply(x, keep)
        })
        .collect()
}

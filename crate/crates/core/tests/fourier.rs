use std::f64::consts::PI;

use dentseg::fourier::*;
use dentseg::preprocess::Slice2D;
use dentseg::volume::ValueUnit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slice(h: usize, w: usize, data: Vec<f32>) -> Slice2D {
    Slice2D::from_data(h, w, data, ValueUnit::Normalized).unwrap()
}

fn random_slice(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Slice2D {
    slice(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect())
}

/// Direct O(n^4) DFT, center-shifted: returns (re, im) at shifted positions.
fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let a = -2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    re += x[r * w + c] * a.cos();
                    im += x[r * w + c] * a.sin();
                }
            }
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = (re, im);
        }
    }
    out
}

fn naive_idft(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    // inputs are unshifted
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let a = 2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    let i = u * w + v;
                    acc += re[i] * a.cos() - im[i] * a.sin();
                }
            }
            out[r * w + c] = acc / (h * w) as f64;
        }
    }
    out
}

#[test]
fn two_by_two_matches_direct_sum() {
    let s = Slice2D::from_data(2, 2, vec![1.0, 2.0, 3.0, 4.0], ValueUnit::Raw).unwrap();
    let sp = dft2_forward(&s);
    let oracle = naive_dft(&[1.0, 2.0, 3.0, 4.0], 2, 2);
    for (i, &(re, im)) in oracle.iter().enumerate() {
        assert!((sp.amplitude[i] - (re * re + im * im).sqrt()).abs() < 1e-6);
    }
    let mut amps = sp.amplitude.clone();
    amps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (a, e) in amps.iter().zip([10.0, 4.0, 2.0, 0.0]) {
        assert!((a - e).abs() < 1e-6, "{amps:?}");
    }
    assert!((sp.amplitude[sp.dc_index()] - 10.0).abs() < 1e-12);
}

#[test]
fn random_shapes_match_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let s = random_slice(&mut rng, h, w);
        let x: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
        let sp = dft2_forward(&s);
        for (i, &(re, im)) in naive_dft(&x, h, w).iter().enumerate() {
            let a = (re * re + im * im).sqrt();
            assert!((sp.amplitude[i] - a).abs() < 1e-9);
            if a > 1e-6 {
                let d = (sp.phase[i] - im.atan2(re)).rem_euclid(2.0 * PI);
                assert!(d.min(2.0 * PI - d) < 1e-6);
            }
        }
    }
}

#[test]
fn round_trip_on_a_thousand_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..33), rng.random_range(1..33));
        let s = random_slice(&mut rng, h, w);
        let back = dft2_inverse(&dft2_forward(&s)).unwrap();
        for (a, b) in s.data.iter().zip(&back.data) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    assert!(worst < 1e-5, "max abs error {worst}");
}

#[test]
fn parseval_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let s = random_slice(&mut rng, h, w);
        let energy: f64 = s.data.iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral: f64 = dft2_forward(&s).amplitude.iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        assert!((energy - spectral).abs() <= 1e-4 * energy.max(1e-12));
    }
}

#[test]
fn spectrum_symmetry_and_phase_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let sp = dft2_forward(&random_slice(&mut rng, h, w));
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let j = mirror_index(r, h) * w + mirror_index(c, w);
                assert_eq!(sp.amplitude[i], sp.amplitude[j]);
                assert!(sp.phase[i] > -PI && sp.phase[i] <= PI);
                if sp.amplitude[i] > 1e-9 && i != j {
                    let s = sp.phase[i] + sp.phase[j];
                    assert!(s.abs() < 1e-12 || (s.abs() - 2.0 * PI).abs() < 1e-12);
                }
            }
        }
    }
}

fn fixed(lambda: f64, beta: f64, mode: BlendMode) -> FtaConfig {
    FtaConfig {
        lambda: LambdaPolicy::Fixed(lambda),
        mask_fraction: beta,
        mode,
        seed: 0,
    }
}

fn max_diff(a: &Slice2D, b: &[f32]) -> f32 {
    a.data.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn standard_fda_with_zero_lambda_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (a, b) = (random_slice(&mut rng, h, w), random_slice(&mut rng, h, w));
        let out = fta_augment_pair(&a, &b, &fixed(0.0, rng.random(), BlendMode::StandardFda)).unwrap();
        assert!(max_diff(&out.z_w, &a.data) < 1e-5);
        assert!(max_diff(&out.z_u, &b.data) < 1e-5);
    }
}

#[test]
fn paper_literal_with_empty_mask_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (a, b) = (random_slice(&mut rng, h, w), random_slice(&mut rng, h, w));
        let l: f64 = rng.random();
        let out = fta_augment_pair(&a, &b, &fixed(l, 0.0, BlendMode::PaperLiteral)).unwrap();
        let scaled: Vec<f32> = a.data.iter().map(|&v| ((1.0 - l) * v as f64) as f32).collect();
        assert!(max_diff(&out.z_w, &scaled) < 1e-5);
    }
}

#[test]
fn four_by_four_matches_direct_oracle() {
    let (h, w) = (4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..50 {
        let (a, b) = (random_slice(&mut rng, h, w), random_slice(&mut rng, h, w));
        let (lambda, beta) = if case == 0 { (0.5, 0.5) } else { (rng.random(), rng.random()) };
        let mode = if case % 2 == 0 { BlendMode::PaperLiteral } else { BlendMode::StandardFda };
        let out = fta_augment_pair(&a, &b, &fixed(lambda, beta, mode)).unwrap();

        let mask = symmetrize_mask(&make_center_mask(h, w, beta).unwrap(), h, w);
        let xa: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
        let (fa, fb) = (naive_dft(&xa, h, w), naive_dft(&xb, h, w));
        for (own, other, got) in [(&fa, &fb, &out.z_w), (&fb, &fa, &out.z_u)] {
            let mut re = vec![0.0; h * w];
            let mut im = vec![0.0; h * w];
            for u in 0..h {
                for v in 0..w {
                    let sh = ((u + h / 2) % h) * w + (v + w / 2) % w;
                    let (ore, oim) = own[sh];
                    let (tre, tim) = other[sh];
                    let ao = (ore * ore + oim * oim).sqrt();
                    let at = (tre * tre + tim * tim).sqrt();
                    let m = mask[sh] as f64;
                    let amp = match mode {
                        BlendMode::PaperLiteral => (1.0 - lambda) * ao * (1.0 - m) + lambda * at * m,
                        BlendMode::StandardFda => ao * (1.0 - m) + ((1.0 - lambda) * ao + lambda * at) * m,
                    };
                    let ph = oim.atan2(ore);
                    re[u * w + v] = amp * ph.cos();
                    im[u * w + v] = amp * ph.sin();
                }
            }
            let want = naive_idft(&re, &im, h, w);
            for (g, e) in got.data.iter().zip(&want) {
                assert!((*g as f64 - e).abs() < 1e-6, "case {case}: {g} vs {e}");
            }
        }
    }
}

#[test]
fn augmentation_is_deterministic_and_swappable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, b) = (random_slice(&mut rng, 8, 6), random_slice(&mut rng, 8, 6));
    let cfg = FtaConfig { seed: 3, ..FtaConfig::default() };
    let one = fta_augment_pair(&a, &b, &cfg).unwrap();
    assert_eq!(one, fta_augment_pair(&a, &b, &cfg).unwrap());
    let swapped = fta_augment_pair(&b, &a, &cfg).unwrap();
    assert_eq!(one.z_w.data, swapped.z_u.data);
    assert_eq!(one.z_u.data, swapped.z_w.data);
    assert!(one.residue < MAX_IMAGINARY_RESIDUE);
}

#[test]
fn augmentation_rejects_raw_or_mismatched_input() {
    let a = slice(4, 4, vec![0.5; 16]);
    let raw = Slice2D::from_data(4, 4, vec![600.0; 16], ValueUnit::Raw).unwrap();
    assert!(fta_augment_pair(&a, &raw, &FtaConfig::default()).is_err());
    assert!(fta_augment_pair(&a, &slice(2, 8, vec![0.5; 16]), &FtaConfig::default()).is_err());
    assert!(fta_augment_pair(&a, &a, &fixed(1.5, 0.1, BlendMode::PaperLiteral)).is_err());
}

use dentseg::preprocess::Slice2D;
use dentseg::segmenter::*;
use dentseg::ssl::feature_perturb;
use dentseg::volume::ValueUnit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_slice(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Slice2D {
    Slice2D::from_data(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect(), ValueUnit::Normalized).unwrap()
}

fn loss(model: &PatchMlp, ex: &Example<'_>) -> f64 {
    let probs = model.predict_probs_perturbed(ex.input, ex.perturb).unwrap();
    probs
        .iter()
        .zip(ex.targets)
        .zip(ex.weights)
        .map(|((&p, &y), &w)| w * bce_term(p, y as f64))
        .sum()
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for case in 0..50 {
        let shape = ModelShape {
            patch: [1, 3, 5][rng.random_range(0..3)],
            hidden1: rng.random_range(1..6),
            hidden2: rng.random_range(1..5),
        };
        let model = PatchMlp::new(shape, case).unwrap();
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let input = random_slice(&mut rng, h, w);
        let targets: Vec<f32> = (0..h * w).map(|_| rng.random()).collect();
        let weights: Vec<f64> = (0..h * w)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() })
            .collect();
        let perturb = (case % 2 == 1).then(|| Perturbation {
            rate: 0.3,
            seed: case,
        });
        let ex = Example {
            input: &input,
            targets: &targets,
            weights: &weights,
            perturb,
        };
        let mut grad = vec![0.0; shape.param_count()];
        let l = model.accumulate_gradient(&ex, &mut grad).unwrap();
        assert!((l - loss(&model, &ex)).abs() < 1e-12);

        let step = 1e-6;
        for i in 0..shape.param_count() {
            let mut p = model.params().to_vec();
            p[i] += step;
            let up = loss(&PatchMlp::from_params(shape, p.clone()).unwrap(), &ex);
            p[i] -= 2.0 * step;
            let down = loss(&PatchMlp::from_params(shape, p).unwrap(), &ex);
            let numeric = (up - down) / (2.0 * step);
            let scale = grad[i].abs().max(numeric.abs());
            if scale < 1e-7 {
                assert!((grad[i] - numeric).abs() < 1e-9);
                continue;
            }
            let rel = (grad[i] - numeric).abs() / scale;
            assert!(rel < 1e-4, "case {case} param {i}: {} vs {numeric}", grad[i]);
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn tiny_forward_pass_matches_hand_computation() {
    let shape = ModelShape {
        patch: 3,
        hidden1: 1,
        hidden2: 1,
    };
    // W1 = 0.1 * (1..=9), b1 = -0.5, W2 = 2, b2 = 0.25, w3 = -1.5, b3 = 0.3
    let mut params: Vec<f64> = (1..=9).map(|v| 0.1 * v as f64).collect();
    params.extend([-0.5, 2.0, 0.25, -1.5, 0.3]);
    let model = PatchMlp::from_params(shape, params).unwrap();
    let data = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    let input = Slice2D::from_data(3, 3, data.clone(), ValueUnit::Normalized).unwrap();
    let probs = model.predict_probs(&input).unwrap();

    let (l, a) = (SELU_LAMBDA, SELU_ALPHA);
    let selu = |z: f64| if z > 0.0 { l * z } else { l * a * (z.exp() - 1.0) };
    let reflect = |i: isize| match i {
        -1 => 1,
        3 => 1,
        i => i as usize,
    };
    for r in 0..3isize {
        for c in 0..3isize {
            let mut z1 = -0.5;
            let mut k = 1.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    z1 += 0.1 * k * data[reflect(r + dr) * 3 + reflect(c + dc)] as f32 as f64;
                    k += 1.0;
                }
            }
            let z2 = 2.0 * selu(z1) + 0.25;
            let logit = -1.5 * selu(z2) + 0.3;
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!((probs[(r * 3 + c) as usize] - p).abs() < 1e-12);
        }
    }
}

/// Textbook Adam, for comparison with the decoupled variant at zero decay.
fn adam(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
    for i in 0..params.len() {
        m[i] = 0.9 * m[i] + 0.1 * grads[i];
        v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
        let mh = m[i] / (1.0 - 0.9f64.powi(t));
        let vh = v[i] / (1.0 - 0.999f64.powi(t));
        params[i] -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[test]
fn adamw_without_decay_is_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 17;
    let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut b = a.clone();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut state = OptimizerState::new(
        n,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    for t in 1..=50 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        adamw_step(&mut a, &g, &mut state, 1e-2).unwrap();
        adam(&mut b, &g, &mut m, &mut v, t, 1e-2);
    }
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_gradient_only_decays() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let cfg = AdamWConfig::default();
    for lr in [1e-4, 3e-3, 0.5] {
        let mut p = params.clone();
        let mut state = OptimizerState::new(p.len(), cfg);
        adamw_step(&mut p, &vec![0.0; 64], &mut state, lr).unwrap();
        let factor = 1.0 - lr * cfg.weight_decay;
        for (after, before) in p.iter().zip(&params) {
            assert_eq!(*after, before * factor);
        }
    }
}

#[test]
fn poly_schedule_endpoints() {
    for n in [1, 7, 1000] {
        let s = TrainSchedule::new(DEFAULT_LR, n).unwrap();
        assert_eq!(poly_lr(&s, 0).unwrap(), 1e-4);
        assert_eq!(poly_lr(&s, n).unwrap(), 0.0);
        let mut last = f64::INFINITY;
        for i in 0..=n {
            let lr = poly_lr(&s, i).unwrap();
            assert!(lr <= last);
            last = lr;
        }
    }
    assert_eq!(POLY_POWER, 0.9);
}

#[test]
fn alpha_dropout_preserves_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = rand_distr::StandardNormal;
    let x: Vec<f64> = (0..100_000).map(|_| rng.sample(normal)).collect();
    for rate in [0.05, 0.1, 0.3] {
        let y = feature_perturb(&x, rate, 9).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 0.02, "rate {rate}: mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "rate {rate}: var {var}");
        let sat = AlphaDropout::new(rate).apply(0.0, false);
        let dropped = y.iter().filter(|&&v| v == sat).count() as f64 / x.len() as f64;
        assert!((dropped - rate).abs() < 0.01, "rate {rate}: dropped {dropped}");
        assert_eq!(y, feature_perturb(&x, rate, 9).unwrap());
    }
    assert!((AlphaDropout::SATURATION + 1.758_099_340_847_376_6).abs() < 1e-12);
}

#[test]
fn saved_checkpoint_reloads_identically() {
    let shape = ModelShape::default();
    let ck = Checkpoint {
        model: PatchMlp::new(shape, 1).unwrap(),
        optimizer: OptimizerState::new(shape.param_count(), AdamWConfig::default()),
    }
    .quantized();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.seg");
    save_checkpoint(&ck, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, encode_checkpoint(&decode_checkpoint(&bytes).unwrap()));
}

#[test]
fn non_finite_parameters_are_numeric_errors() {
    let shape = ModelShape { patch: 1, hidden1: 1, hidden2: 1 };
    let mut model = PatchMlp::zeros(shape).unwrap();
    model.params_mut()[0] = f64::NAN;
    let input = Slice2D::from_data(1, 1, vec![0.5], ValueUnit::Normalized).unwrap();
    let e = model.predict_probs(&input).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

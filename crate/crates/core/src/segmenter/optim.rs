use super::check_finite;
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;
pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub lr_base: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl TrainSchedule {
    pub fn new(lr_base: f64, total_iters: usize) -> Result<Self> {
        if !(lr_base > 0.0) || !lr_base.is_finite() || total_iters == 0 {
            return Err(Error::Config(format!(
                "schedule needs lr_b > 0 and N >= 1, got lr_b = {lr_base}, N = {total_iters}"
            )));
        }
        Ok(Self {
            lr_base,
            total_iters,
            power: POLY_POWER,
        })
    }
}

/// `lr_b * (1 - i / N)^0.9`.
pub fn poly_lr(sched: &TrainSchedule, iteration: usize) -> Result<f64> {
    if iteration > sched.total_iters {
        return Err(Error::Schedule {
            iteration,
            total: sched.total_iters,
        });
    }
    let frac = 1.0 - iteration as f64 / sched.total_iters as f64;
    Ok(sched.lr_base * frac.powf(sched.power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    check_finite(grads, "grad")?;
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - lr * c.weight_decay;
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        let s = TrainSchedule::new(DEFAULT_LR, 100).unwrap();
        assert_eq!(poly_lr(&s, 0).unwrap(), 1e-4);
        assert_eq!(poly_lr(&s, 100).unwrap(), 0.0);
        // 0.5^0.9 = exp(0.9 ln 0.5)
        let half = (0.9 * 0.5f64.ln()).exp();
        assert!((poly_lr(&s, 50).unwrap() - 1e-4 * half).abs() < 1e-18);
        assert!((poly_lr(&s, 50).unwrap() - 5.359e-5).abs() < 1e-8);
        assert!(matches!(poly_lr(&s, 101), Err(Error::Schedule { .. })));
    }

    #[test]
    fn schedule_rejects_bad_config() {
        assert!(TrainSchedule::new(0.0, 10).is_err());
        assert!(TrainSchedule::new(1e-3, 0).is_err());
    }

    #[test]
    fn decay_only_step() {
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        let mut st = OptimizerState::new(3, AdamWConfig::default());
        let lr = 0.01;
        adamw_step(&mut p, &[0.0; 3], &mut st, lr).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - lr * 1e-4));
        }
    }

    #[test]
    fn first_step_hand_computed() {
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(1, AdamWConfig::default());
        adamw_step(&mut p, &[1.0], &mut st, 0.1).unwrap();
        // m_hat = v_hat = 1 after bias correction.
        let expected = 1.0 * (1.0 - 0.1 * 1e-4) - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.89999).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.0];
        let mut st = OptimizerState::new(1, AdamWConfig::default());
        assert!(matches!(
            adamw_step(&mut p, &[f64::NAN], &mut st, 0.1),
            Err(Error::Numeric(_))
        ));
        assert!(adamw_step(&mut p, &[0.0, 1.0], &mut st, 0.1).is_err());
    }
}

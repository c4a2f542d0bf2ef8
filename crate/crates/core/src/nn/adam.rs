use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, actual: len });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_from_rest_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = vec![0.0];
        let mut s = AdamState { m: vec![0.5], v: vec![0.25], t: 3 };
        adam_step(&mut p, &[0.0], &mut s, 0.0, &AdamConfig::default()).unwrap();
        assert!((s.m[0] - 0.45).abs() < 1e-15);
        assert!((s.v[0] - 0.24975).abs() < 1e-15);
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // at t = 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 0.01, &AdamConfig::default()).unwrap();
        for i in 0..3 {
            let expected = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_reference_over_100_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5;
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = AdamState::new(n);
        // reference: scalar loop with explicit running products
        let mut rp = p.clone();
        let (mut rm, mut rv) = (vec![0.0; n], vec![0.0; n]);
        let (mut b1t, mut b2t) = (1.0f64, 1.0f64);
        let cfg = AdamConfig::default();
        for _ in 0..100 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            adam_step(&mut p, &g, &mut s, 3e-3, &cfg).unwrap();
            b1t *= 0.9;
            b2t *= 0.999;
            for i in 0..n {
                rm[i] = 0.9 * rm[i] + 0.1 * g[i];
                rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
                rp[i] -= 3e-3 * (rm[i] / (1.0 - b1t)) / ((rv[i] / (1.0 - b2t)).sqrt() + 1e-8);
            }
        }
        for i in 0..n {
            assert!((p[i] - rp[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, &AdamConfig::default()).is_err());
    }
}

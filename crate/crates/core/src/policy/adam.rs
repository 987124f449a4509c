//! Bias-corrected Adam.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Hyper-parameters of the optimiser; see `TrainConfig` for defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// One in-place update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid("adam step index starts at 1"));
    }
    if grads.len() != params.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::invalid("adam buffers differ in length"));
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: AdamConfig = AdamConfig {
        learning_rate: 0.005,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut m = AdamMoments::zeros(3);
        adam_step(&mut p, &[0.0; 3], &mut m, 1, &CFG).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut m = AdamMoments::zeros(3);
        adam_step(&mut p, &g, &mut m, 1, &CFG).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            // closed form: -lr · g / (|g| + ε)
            let expect = -CFG.learning_rate * gi / (gi.abs() + CFG.epsilon);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi.abs() - CFG.learning_rate).abs() < 1e-7);
        }
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let g = [0.3, -2.0, 0.05];
        let g10: Vec<f64> = g.iter().map(|x| 10.0 * x).collect();
        let (mut a, mut b) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut a, &g, &mut AdamMoments::zeros(3), 1, &CFG).unwrap();
        adam_step(&mut b, &g10, &mut AdamMoments::zeros(3), 1, &CFG).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(((x - y) / x).abs() < 1e-6);
        }
    }

    #[test]
    fn step_zero_is_rejected() {
        let mut p = vec![0.0];
        assert!(adam_step(&mut p, &[1.0], &mut AdamMoments::zeros(1), 0, &CFG).is_err());
    }
}

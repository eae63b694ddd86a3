use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers mirror the parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grad_slices = grads.slices();
        check_grads(&grad_slices, &self.m)?;

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let mut param_slices = params.slices_mut();
        if param_slices.len() != self.m.len() {
            return Err(Error::input("parameter layout changed under the optimizer"));
        }
        for (((p, g), m), v) in param_slices
            .iter_mut()
            .zip(&grad_slices)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.len() != m.len() {
                return Err(Error::input("parameter layout changed under the optimizer"));
            }
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<P: ParamSet + ?Sized>(&self, params: &mut P, grads: &P) -> Result<()> {
        let grad_slices = grads.slices();
        let shapes: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        check_grads(&grad_slices, &shapes)?;
        for (p, g) in params.slices_mut().into_iter().zip(&grad_slices) {
            for (pi, gi) in p.iter_mut().zip(g.iter()) {
                *pi -= self.lr * gi;
            }
        }
        Ok(())
    }
}

fn check_grads(grads: &[&[f64]], shapes: &[Vec<f64>]) -> Result<()> {
    if grads.len() != shapes.len() || grads.iter().zip(shapes).any(|(g, s)| g.len() != s.len()) {
        return Err(Error::input("gradient shapes do not match parameters"));
    }
    let mut offset = 0;
    for g in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { index: offset + i });
        }
        offset += g.len();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor2;

    fn scalar(v: f64) -> Tensor2 {
        Tensor2::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor2::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor2::zeros(1, 3);
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps_taken(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        for g in [3.7, -0.002] {
            let mut p = scalar(1.0);
            let cfg = AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            };
            let mut adam = AdamState::new(cfg, &p);
            adam.step(&mut p, &scalar(g)).unwrap();
            let moved = 1.0 - p.get(0, 0);
            assert!((moved - 0.05 * g.signum()).abs() < 1e-6, "moved {moved}");
        }
    }

    #[test]
    fn two_steps_match_hand_stepped_recurrence() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        // Hand recurrence with constant gradient 1.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        // Both bias-corrected ratios are 1, so each step is lr / (1 + eps).
        assert!((x + 2.0 * 0.1 / (1.0 + 1e-8)).abs() < 1e-12);

        let mut p = scalar(0.0);
        let mut adam = AdamState::new(
            AdamConfig {
                lr,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &p,
        );
        adam.step(&mut p, &scalar(1.0)).unwrap();
        adam.step(&mut p, &scalar(1.0)).unwrap();
        assert!((p.get(0, 0) - x).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_reports_index_and_leaves_params() {
        let mut p = Tensor2::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor2::from_vec(1, 3, vec![0.0, 0.0, 0.0]).map(|mut g| {
            g.data_mut()[2] = f64::INFINITY;
            g
        });
        let g = g.unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 2 }));
        assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn sgd_steps_against_gradient() {
        let mut p = scalar(1.0);
        Sgd { lr: 0.5 }.step(&mut p, &scalar(2.0)).unwrap();
        assert_eq!(p.get(0, 0), 0.0);
    }
}

//! AdamW: Adam with decoupled weight decay.

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite or any shape disagrees.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::shape("adam param", self.m[i].shape(), p.shape()));
            }
            if g.shape() != p.shape() {
                return Err(Error::shape("adam grad", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of tensor {i}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pv *= decay;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let mut st = AdamState::new(cfg, &[(1, 1)]);
            let mut p = one(1.0);
            st.update(&mut [&mut p], &[&one(g)]).unwrap();
            // first step: mhat = g, vhat = g², so Δ = −lr·g/(|g| + ε)
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.data()[0] - expected).abs() < 1e-14);
            let eps_effect = cfg.lr * cfg.eps / g.abs();
            assert!(((p.data()[0] - 1.0) + cfg.lr * g.signum()).abs() <= eps_effect + 1e-15);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[(1, 2)]);
        let mut p = Matrix::row_vector(&[0.5, -0.25]);
        st.update(&mut [&mut p], &[&Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(p.data(), &[0.5, -0.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.2,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &[(1, 1)]);
        let mut p = one(2.0);
        st.update(&mut [&mut p], &[&one(0.0)]).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - 0.1 * 0.2));
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut st = AdamState::new(AdamConfig::default(), &[(1, 1), (1, 1)]);
        let mut a = one(1.0);
        let mut b = one(1.0);
        let before = st.clone();
        let r = st.update(&mut [&mut a, &mut b], &[&one(0.1), &one(f64::INFINITY)]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(st, before);
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn repeated_updates_are_bit_deterministic() {
        let run = || {
            let mut st = AdamState::new(AdamConfig::default(), &[(2, 2)]);
            let mut p = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap();
            for k in 0..10 {
                let g = Matrix::from_fn(2, 2, |i, j| ((i * 2 + j + k) as f64).sin());
                st.update(&mut [&mut p], &[&g]).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }
}

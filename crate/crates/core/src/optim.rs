//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{CmtaError, Result};
use crate::params::ParamStore;
use crate::tensor::{c, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    /// One bias-corrected Adam update. Gradients are checked for finiteness
    /// before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(CmtaError::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.get(i).shape() {
                return Err(CmtaError::config(format!(
                    "gradient shape {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    store.name(i),
                    store.get(i).shape()
                )));
            }
            if !g.all_finite() {
                return Err(CmtaError::NonFiniteGradient {
                    param: store.name(i).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (c::<F>(self.beta1), c::<F>(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bc1 = c::<F>(1.0 - self.beta1.powi(t));
        let bc2 = c::<F>(1.0 - self.beta2.powi(t));
        let (lr, eps) = (c::<F>(lr), c::<F>(self.eps));
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau in maximize mode with a relative improvement threshold:
/// a metric counts as an improvement when it exceeds `best · (1 + threshold)`.
/// After more than `patience` consecutive non-improving epochs the rate is
/// multiplied by `factor` and the counter resets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: u32,
    pub threshold: f64,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: u32,
    pub reductions: u32,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u32, threshold: f64) -> Result<Self> {
        if !(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience == 0 || threshold < 0.0 {
            return Err(CmtaError::config(format!(
                "invalid scheduler (lr={lr}, factor={factor}, patience={patience}, threshold={threshold})"
            )));
        }
        Ok(PlateauScheduler {
            factor,
            patience,
            threshold,
            lr,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
            reductions: 0,
        })
    }

    fn improves(&self, metric: f64) -> bool {
        if self.best == f64::NEG_INFINITY {
            return true;
        }
        metric > self.best * (1.0 + self.threshold)
    }

    /// Feeds one epoch's validation metric; returns the learning rate for the
    /// next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if self.improves(metric) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.reductions += 1;
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &[Tensor::zeros(&[2])], 1e-3).unwrap();
        assert_eq!(s.get(0).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[0.0, 0.0]);
        let mut st = AdamState::new(&s);
        st.step(&mut s, &[Tensor::vector(vec![0.3, -7.0]).unwrap()], 1e-4).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((s.get(0).data()[0] + 1e-4 * 0.3 / (0.3 + 1e-8)).abs() < 1e-18);
        assert!((s.get(0).data()[1] - 1e-4 * 7.0 / (7.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn matches_recurrence_transcription() {
        let grads = [0.5f64, -0.25];
        let mut s = store(&[1.0]);
        let mut st = AdamState::new(&s);
        for g in grads {
            st.step(&mut s, &[Tensor::vector(vec![g]).unwrap()], 0.01).unwrap();
        }
        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.get(0).data()[0] - p).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[1.0]);
        let mut st = AdamState::new(&s);
        let err = st.step(&mut s, &[Tensor::vector(vec![f64::NAN]).unwrap()], 0.1).unwrap_err();
        assert!(matches!(err, CmtaError::NonFiniteGradient { ref param } if param == "w"));
        assert_eq!(s.get(0).data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn improving_metric_keeps_lr() {
        let mut s = PlateauScheduler::new(1e-4, 0.5, 5, 1e-4).unwrap();
        for k in 0..10 {
            assert_eq!(s.step(0.5 + 0.01 * k as f64), 1e-4);
        }
    }

    #[test]
    fn plateau_halves_once_then_twice() {
        let mut s = PlateauScheduler::new(1e-4, 0.5, 5, 1e-4).unwrap();
        s.step(0.8);
        let lrs: Vec<f64> = (0..6).map(|_| s.step(0.8)).collect();
        assert_eq!(&lrs[..5], &[1e-4; 5]);
        assert_eq!(lrs[5], 0.5e-4);
        assert_eq!(s.reductions, 1);
        for _ in 0..6 {
            s.step(0.8);
        }
        assert_eq!(s.lr, 1e-4 * 0.25);
        assert_eq!(s.reductions, 2);
    }

    #[test]
    fn tiny_gain_below_threshold_is_not_improvement() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 1, 1e-4).unwrap();
        s.step(0.9);
        s.step(0.9 * (1.0 + 5e-5));
        assert_eq!(s.bad_epochs, 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(PlateauScheduler::new(1e-4, 0.5, 0, 1e-4).is_err());
        assert!(PlateauScheduler::new(1e-4, 1.5, 5, 1e-4).is_err());
    }
}

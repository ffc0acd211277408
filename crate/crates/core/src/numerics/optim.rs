//! AdamW with decoupled weight decay, and a reduce-on-plateau learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| p.map(|_| 0.0);
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One AdamW update.
    ///
    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
    /// A non-finite gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adamw", &[self.m.len()], &[params.len(), grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((th, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *th);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            factor: 0.5,
            patience: 5,
            min_lr: 1e-6,
        }
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the validation loss.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    config: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            lr: config.initial_lr.max(config.min_lr),
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate in effect after replaying `val_history`.
pub fn lr_schedule(config: PlateauConfig, val_history: &[f64]) -> f64 {
    let mut s = PlateauSchedule::new(config);
    for &v in val_history {
        s.observe(v);
    }
    s.lr()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamWState::new(cfg, &[&p]);
        for _ in 0..3 {
            st.step(&mut [&mut p], &[Tensor::zeros(1, 3)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 3);
    }

    #[test]
    fn single_step_hand_computed() {
        // m_hat = 1, v_hat = 1  =>  theta = -0.1 / (1 + 1e-8)
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamWState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.item() - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = Tensor::scalar(2.0);
        let mut st = AdamWState::new(cfg, &[&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamWState::new(AdamWConfig::default(), &[&p]);
        let err = st.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::NonFiniteGradient(0))));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn plateau_schedule() {
        let cfg = PlateauConfig::default();
        assert_eq!(lr_schedule(cfg, &[]), 1e-4);
        assert_eq!(lr_schedule(cfg, &[1.0]), 1e-4);
        assert_eq!(lr_schedule(cfg, &[1.0, 1.0, 1.0, 1.0, 1.0]), 1e-4);
        assert_eq!(lr_schedule(cfg, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]), 5e-5);
        // improvements reset the counter
        assert_eq!(lr_schedule(cfg, &[5.0, 5.0, 5.0, 5.0, 4.0, 4.0, 4.0]), 1e-4);
        let flat = vec![1.0; 1000];
        assert_eq!(lr_schedule(cfg, &flat), 1e-6);
    }
}

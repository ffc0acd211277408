//! Training loop bookkeeping shared by the autoencoder models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::numerics::{AdamWConfig, PlateauConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs without improvement before the learning rate is halved.
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::autoencoder()
    }
}

impl TrainConfig {
    /// Defaults for the deterministic autoencoder (samples are member fields).
    pub fn autoencoder() -> Self {
        Self {
            batch_size: 1024,
            max_epochs: 500,
            early_stop_patience: 20,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            plateau_patience: 5,
            min_lr: 1e-6,
            seed: 0,
        }
    }

    /// Defaults for the invariant VAE (samples are whole-day ensembles).
    pub fn ivae() -> Self {
        Self {
            batch_size: 8,
            ..Self::autoencoder()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 || self.plateau_patience == 0 {
            return Err(crate::Error::InvalidArgument(
                "batch_size and patience values must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(crate::Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            initial_lr: self.learning_rate,
            patience: self.plateau_patience,
            min_lr: self.min_lr,
            ..PlateauConfig::default()
        }
    }
}

/// Raw (unweighted) loss components of the invariant VAE.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub energy: f64,
    pub sinkhorn: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub lr: f64,
    pub train_components: Option<Components>,
    pub val_components: Option<Components>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.best_val_loss)
    }

    pub fn to_csv(&self) -> String {
        let with_components = self.epochs.iter().any(|e| e.train_components.is_some());
        let mut out = String::from("epoch,train_loss,val_loss,best_val_loss,lr");
        if with_components {
            out.push_str(",train_energy,train_sinkhorn,train_kl,val_energy,val_sinkhorn,val_kl");
        }
        out.push('\n');
        for e in &self.epochs {
            write!(
                out,
                "{},{:e},{:e},{:e},{:e}",
                e.epoch, e.train_loss, e.val_loss, e.best_val_loss, e.lr
            )
            .unwrap();
            if with_components {
                for c in [e.train_components, e.val_components] {
                    let c = c.unwrap_or_default();
                    write!(out, ",{:e},{:e},{:e}", c.energy, c.sinkhorn, c.kl).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val: f64) -> Verdict {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

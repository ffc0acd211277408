//! Ensemble datasets, global standardization and day splits.

pub mod eff;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use eff::{read_eff, write_eff, EFF_MAGIC, EFF_VERSION};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `T` days of `M`-member ensembles of `H x W` scalar fields.
///
/// Values are stored flat in `[day][member][row][col]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    pub variable_name: String,
    pub n_days: usize,
    pub n_members: usize,
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    pub day_labels: Vec<String>,
    /// Optional per-day seasonal phase in radians, carried through to exports.
    pub season_phase: Option<Vec<f64>>,
}

impl EnsembleDataset {
    pub fn new(
        variable_name: impl Into<String>,
        n_days: usize,
        n_members: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = n_days * n_members * height * width;
        if values.len() != expected {
            return Err(Error::shape(
                "ensemble dataset",
                &[n_days, n_members, height, width],
                &[values.len()],
            ));
        }
        if n_members < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 members, got {n_members}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            variable_name: variable_name.into(),
            n_days,
            n_members,
            height,
            width,
            values,
            day_labels: (0..n_days).map(|t| t.to_string()).collect(),
            season_phase: None,
        })
    }

    pub fn with_day_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_days {
            return Err(Error::shape("day labels", &[self.n_days], &[labels.len()]));
        }
        self.day_labels = labels;
        Ok(self)
    }

    pub fn with_season_phase(mut self, phase: Vec<f64>) -> Result<Self> {
        if phase.len() != self.n_days {
            return Err(Error::shape("season phase", &[self.n_days], &[phase.len()]));
        }
        self.season_phase = Some(phase);
        Ok(self)
    }

    /// Flattened field dimension `H * W`.
    pub fn d_data(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn day_len(&self) -> usize {
        self.n_members * self.d_data()
    }

    /// All members of day `t`, flat.
    pub fn day(&self, t: usize) -> &[f64] {
        let n = self.day_len();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn member(&self, t: usize, m: usize) -> &[f64] {
        let d = self.d_data();
        &self.day(t)[m * d..(m + 1) * d]
    }

    /// Day `t` as an `M x d_data` matrix.
    pub fn day_tensor(&self, t: usize) -> Tensor {
        Tensor::matrix(self.n_members, self.d_data(), self.day(t).to_vec())
    }

    /// Every member of every day in `days`, stacked as rows.
    pub fn member_matrix(&self, days: Range<usize>) -> Tensor {
        let start = days.start * self.day_len();
        let end = days.end * self.day_len();
        Tensor::matrix(
            days.len() * self.n_members,
            self.d_data(),
            self.values[start..end].to_vec(),
        )
    }

    /// Dataset restricted to the days in `days`.
    pub fn subset(&self, days: Range<usize>) -> Self {
        let n = self.day_len();
        Self {
            variable_name: self.variable_name.clone(),
            n_days: days.len(),
            n_members: self.n_members,
            height: self.height,
            width: self.width,
            values: self.values[days.start * n..days.end * n].to_vec(),
            day_labels: self.day_labels[days.clone()].to_vec(),
            season_phase: self.season_phase.as_ref().map(|p| p[days].to_vec()),
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    #[cfg(test)]
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Contiguous, ordered, non-overlapping day ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    /// Consecutive blocks of the given sizes starting at day 0.
    pub fn consecutive(n_train: usize, n_validation: usize, n_test: usize) -> Self {
        let v0 = n_train;
        let t0 = v0 + n_validation;
        Self {
            train: 0..n_train,
            validation: v0..t0,
            test: t0..t0 + n_test,
        }
    }

    pub fn validate(&self, n_days: usize) -> Result<()> {
        let parts = [&self.train, &self.validation, &self.test];
        for p in parts {
            if p.start > p.end {
                return Err(Error::InvalidArgument(format!("reversed range {p:?}")));
            }
        }
        if self.train.end > self.validation.start || self.validation.end > self.test.start {
            return Err(Error::InvalidArgument(format!(
                "split ranges overlap or are out of order: {self:?}"
            )));
        }
        if self.test.end > n_days {
            return Err(Error::InvalidArgument(format!(
                "split {self:?} exceeds {n_days} days"
            )));
        }
        Ok(())
    }
}

/// Global scalar mean and standard deviation of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub global_mean: f64,
    pub global_std: f64,
}

impl Standardizer {
    /// Fits on every value of the training days (population standard deviation).
    pub fn fit(ds: &EnsembleDataset, split: &SplitSpec) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::InvalidArgument("empty training split".into()));
        }
        split.validate(ds.n_days)?;
        let n = ds.day_len();
        let vals = &ds.values[split.train.start * n..split.train.end * n];
        let count = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate(
                "training values have zero variance".into(),
            ));
        }
        Ok(Self {
            global_mean: mean,
            global_std: std,
        })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.global_mean) / self.global_std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.global_std + self.global_mean
    }

    pub fn standardize(&self, ds: &EnsembleDataset) -> EnsembleDataset {
        ds.map_values(|x| self.apply(x))
    }

    pub fn destandardize(&self, ds: &EnsembleDataset) -> EnsembleDataset {
        ds.map_values(|z| self.invert(z))
    }

    pub fn destandardize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|z| self.invert(z))
    }

    pub fn standardize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|x| self.apply(x))
    }
}

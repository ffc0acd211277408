//! Synthetic ensembles of spatially correlated Gaussian random fields.
//!
//! Day `t` has a shared signal
//! `A * sin(2 pi t / T) * mode + sigma_day * GRF`, and each member adds its
//! own `sigma_mem * GRF` draw. All random fields use the squared-exponential
//! kernel `k(p, q) = exp(-|p - q|^2 / (2 l^2))` over grid coordinates and are
//! sampled through a dense Cholesky factor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::EnsembleDataset;
use crate::numerics::rng::{stream, Rng};
use crate::numerics::{cholesky, Tensor};
use crate::par;

/// Largest grid that the dense covariance factorization accepts.
pub const MAX_CELLS: usize = 4096;
const KERNEL_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrfConfig {
    pub height: usize,
    pub width: usize,
    /// Kernel length scale in grid units.
    pub length_scale: f64,
    pub day_signal_std: f64,
    pub member_noise_std: f64,
    pub seasonal_amplitude: f64,
    /// Constant added to every value, so the data are not centred by construction.
    pub offset: f64,
    pub n_days: usize,
    pub n_members: usize,
    pub seed: u64,
    pub variable_name: String,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            length_scale: 4.0,
            day_signal_std: 1.0,
            member_noise_std: 0.5,
            seasonal_amplitude: 2.0,
            offset: 10.0,
            n_days: 500,
            n_members: 20,
            seed: 0,
            variable_name: "synthetic".into(),
        }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_days == 0 {
            return bad("n_days must be at least 1".into());
        }
        if self.n_members < 2 {
            return bad(format!("n_members must be at least 2, got {}", self.n_members));
        }
        if self.height == 0 || self.width == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.height * self.width > MAX_CELLS {
            return bad(format!(
                "grid of {} cells exceeds the dense-sampling limit {MAX_CELLS}",
                self.height * self.width
            ));
        }
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return bad(format!("length_scale must be positive, got {}", self.length_scale));
        }
        if !(self.day_signal_std >= 0.0) || !(self.member_noise_std >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        if !self.seasonal_amplitude.is_finite() || !self.offset.is_finite() {
            return bad("amplitude and offset must be finite".into());
        }
        Ok(())
    }
}

/// Squared-exponential covariance over the cells of an `h x w` grid.
pub fn kernel_matrix(height: usize, width: usize, length_scale: f64) -> Tensor {
    let p = height * width;
    let mut k = Tensor::zeros(p, p);
    let inv = 1.0 / (2.0 * length_scale * length_scale);
    for a in 0..p {
        let (ra, ca) = ((a / width) as f64, (a % width) as f64);
        for b in 0..p {
            let (rb, cb) = ((b / width) as f64, (b % width) as f64);
            let d2 = (ra - rb).powi(2) + (ca - cb).powi(2);
            k.set(a, b, (-d2 * inv).exp());
        }
    }
    k
}

/// Fixed spatial pattern modulated by the seasonal cycle: a uniform level
/// plus a north-south gradient.
pub fn seasonal_mode(height: usize, width: usize) -> Vec<f64> {
    (0..height * width)
        .map(|i| {
            let r = (i / width) as f64;
            1.0 + 0.5 * (PI * (r + 0.5) / height as f64).cos()
        })
        .collect()
}

/// Seasonal phase `2 pi t / T` of day `t`.
pub fn season_phase(t: usize, n_days: usize) -> f64 {
    2.0 * PI * t as f64 / n_days as f64
}

pub fn generate(cfg: &GrfConfig) -> Result<EnsembleDataset> {
    cfg.validate()?;
    let p = cfg.height * cfg.width;
    let mut k = kernel_matrix(cfg.height, cfg.width, cfg.length_scale);
    for i in 0..p {
        let v = k.get(i, i) + KERNEL_JITTER;
        k.set(i, i, v);
    }
    let lt = cholesky(&k)?.transpose();
    let mode = seasonal_mode(cfg.height, cfg.width);
    let root = Rng::new(cfg.seed).derive(stream::SYNTH);
    let m = cfg.n_members;

    let days: Vec<Result<Vec<f64>>> = par::map_range(cfg.n_days, |t| {
        let mut rng = root.derive(t as u64);
        // row 0 drives the shared signal, rows 1..=M the members
        let z = rng.normal_tensor(m + 1, p);
        let draws = z.matmul(&lt)?;
        let amp = cfg.seasonal_amplitude * season_phase(t, cfg.n_days).sin();
        let shared: Vec<f64> = (0..p)
            .map(|i| cfg.offset + amp * mode[i] + cfg.day_signal_std * draws.get(0, i))
            .collect();
        let mut out = Vec::with_capacity(m * p);
        for member in 1..=m {
            let row = draws.row(member);
            out.extend(shared.iter().zip(row).map(|(s, x)| s + cfg.member_noise_std * x));
        }
        Ok(out)
    });
    let mut values = Vec::with_capacity(cfg.n_days * m * p);
    for d in days {
        values.extend(d?);
    }
    let phase = (0..cfg.n_days).map(|t| season_phase(t, cfg.n_days)).collect();
    EnsembleDataset::new(
        cfg.variable_name.clone(),
        cfg.n_days,
        m,
        cfg.height,
        cfg.width,
        values,
    )?
    .with_season_phase(phase)
}

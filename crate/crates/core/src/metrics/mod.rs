//! Distances between an input ensemble and its reconstruction.
//!
//! Ensembles are matrices with one member per row. Pixel-wise measures treat
//! every column as a univariate sample; multivariate measures compare whole
//! rows. The functions here work on plain values; [`diff`] records the
//! multivariate distances on a tape for training.

pub mod diff;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::pairwise_sq;
use crate::numerics::Tensor;

pub use report::{DayMetrics, MetricReport, SkillSummary};

fn same_grid(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::shape("ensemble grid", x.shape(), y.shape()));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    Ok(())
}

/// Per-pixel ensemble mean, correctly rounded so that identical members
/// give their common value and member order never matters.
pub fn pixel_mean(x: &Tensor) -> Vec<f64> {
    x.pool_rows().into_data()
}

/// Per-pixel ensemble standard deviation with denominator `M - 1`.
pub fn pixel_std(x: &Tensor) -> Vec<f64> {
    let mean = pixel_mean(x);
    let mut acc = vec![0.0; x.cols()];
    for row in x.row_iter() {
        for ((a, v), m) in acc.iter_mut().zip(row).zip(&mean) {
            *a += (v - m) * (v - m);
        }
    }
    let denom = (x.rows() as f64 - 1.0).max(1.0);
    acc.into_iter().map(|a| (a / denom).sqrt()).collect()
}

/// `|mean(X) - mean(X~)|` at every pixel.
pub fn pixel_mean_absdiff(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    same_grid(x, y)?;
    Ok(pixel_mean(x)
        .into_iter()
        .zip(pixel_mean(y))
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// `sd(X) - sd(X~)` at every pixel; negative where the reconstruction is
/// more variable than the input.
pub fn pixel_std_diff(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    same_grid(x, y)?;
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument(
            "standard deviation needs at least 2 members on each side".into(),
        ));
    }
    Ok(pixel_std(x)
        .into_iter()
        .zip(pixel_std(y))
        .map(|(a, b)| a - b)
        .collect())
}

fn mean_abs_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += (x - y).abs();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Univariate energy distance between two samples, from the V-statistic
/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all pairs (diagonal included).
/// The squared estimate is clamped at zero before the square root.
pub fn energy_distance_uni(x: &[f64], y: &[f64]) -> f64 {
    if x.is_empty() || y.is_empty() {
        return f64::NAN;
    }
    let d2 = 2.0 * mean_abs_pairs(x, y) - mean_abs_pairs(x, x) - mean_abs_pairs(y, y);
    d2.max(0.0).sqrt()
}

/// Squared multivariate energy distance estimate, unclamped.
pub fn energy_distance_multi_sq(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_grid(x, y)?;
    let mean_dist = |a: &Tensor, b: &Tensor| -> Result<f64> {
        let d = pairwise_sq(a, b)?;
        Ok(d.data().iter().map(|v| v.sqrt()).sum::<f64>() / d.len() as f64)
    };
    Ok(2.0 * mean_dist(x, y)? - mean_dist(x, x)? - mean_dist(y, y)?)
}

/// Multivariate energy distance with Euclidean norms between member fields.
pub fn energy_distance_multi(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(energy_distance_multi_sq(x, y)?.max(0.0).sqrt())
}

/// 1-Wasserstein distance of two equal-size univariate samples through
/// their order statistics.
pub fn wasserstein1_uni(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("wasserstein1", &[x.len()], &[y.len()]));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty samples".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Entropic regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Epsilon {
    /// Multiple of the mean pairwise cost of the two ensembles.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: Epsilon,
    pub max_iters: usize,
    /// Stop once the L1 row-marginal violation falls below this; `0` runs
    /// all `max_iters` iterations.
    pub tolerance: f64,
    /// Subtract half of each ensemble's self-transport cost, so that
    /// identical ensembles are at distance zero.
    pub debias: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self::evaluation()
    }
}

impl SinkhornConfig {
    pub fn evaluation() -> Self {
        Self {
            epsilon: Epsilon::Relative(0.05),
            max_iters: 100,
            tolerance: 1e-9,
            debias: true,
        }
    }

    /// Fixed unrolled iterations for differentiation.
    pub fn training() -> Self {
        Self {
            epsilon: Epsilon::Relative(0.05),
            max_iters: 50,
            tolerance: 0.0,
            debias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = match self.epsilon {
            Epsilon::Relative(e) | Epsilon::Absolute(e) => e,
        };
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::InvalidArgument(format!("sinkhorn epsilon must be positive, got {e}")));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("sinkhorn max_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Regularization for a cost matrix with the given mean entry.
    pub fn resolve(&self, mean_cost: f64) -> f64 {
        match self.epsilon {
            Epsilon::Relative(r) => r * mean_cost + EPS_FLOOR,
            Epsilon::Absolute(e) => e,
        }
    }
}

/// Added to relative regularizations so identical ensembles stay well defined.
pub(crate) const EPS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Square root of `divergence` (clamped at zero), the headline value.
    pub distance: f64,
    /// `<plan, cost>` between the two ensembles under squared Euclidean cost.
    pub cost: f64,
    /// `cost` minus the mean of the two self-transport costs when debiasing,
    /// otherwise equal to `cost`.
    pub divergence: f64,
    /// Regularization used for all transport problems of this call.
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct Transport {
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// `<plan, cost>` of the entropic plan between uniform weights.
fn entropic_transport(cost: &Tensor, eps: f64, cfg: &SinkhornConfig) -> Transport {
    let (m, n) = cost.dims();
    let log_a = -(m as f64).ln();
    let log_b = -(n as f64).ln();
    let k: Vec<f64> = cost.data().iter().map(|c| -c / eps).collect();
    let kij = |i: usize, j: usize| k[i * n + j];
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=cfg.max_iters {
        iterations = it;
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = -(logsumexp((0..n).map(|j| kij(i, j) + v[j])) + log_b);
        }
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = -(logsumexp((0..m).map(|i| kij(i, j) + u[i])) + log_a);
        }
        if cfg.tolerance > 0.0 {
            let err: f64 = (0..m)
                .map(|i| {
                    let row: f64 = (0..n)
                        .map(|j| (u[i] + v[j] + kij(i, j) + log_a + log_b).exp())
                        .sum();
                    (row - 1.0 / m as f64).abs()
                })
                .sum();
            if err < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let p = (u[i] + v[j] + kij(i, j) + log_a + log_b).exp();
            total += p * cost.get(i, j);
        }
    }
    Transport {
        cost: total,
        iterations,
        converged,
    }
}

/// Entropic optimal transport between uniform empirical measures with
/// squared Euclidean cost, solved by log-domain Sinkhorn iterations.
///
/// The regularization is resolved once from the cross-cost matrix and
/// shared by the self-transport problems used for debiasing. Reaching
/// `max_iters` without meeting the tolerance is reported through
/// `converged`, not as an error.
pub fn sinkhorn_distance(x: &Tensor, y: &Tensor, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    same_grid(x, y)?;
    cfg.validate()?;
    // The iterates depend on member order and on which side is scaled first,
    // so both ensembles are put in a canonical form. An unconverged result is
    // then still exactly symmetric and permutation invariant.
    let (x, y) = (sorted_members(x), sorted_members(y));
    let (x, y) = if canonical_order(&x, &y) { (x, y) } else { (y, x) };
    let cost = pairwise_sq(&x, &y)?;
    let eps = cfg.resolve(cost.mean());
    let xy = entropic_transport(&cost, eps, cfg);
    let mut converged = xy.converged;
    let divergence = if cfg.debias {
        let xx = entropic_transport(&pairwise_sq(&x, &x)?, eps, cfg);
        let yy = entropic_transport(&pairwise_sq(&y, &y)?, eps, cfg);
        converged = converged && xx.converged && yy.converged;
        xy.cost - 0.5 * xx.cost - 0.5 * yy.cost
    } else {
        xy.cost
    };
    Ok(SinkhornResult {
        distance: divergence.max(0.0).sqrt(),
        cost: xy.cost,
        divergence,
        epsilon: eps,
        iterations: xy.iterations,
        converged,
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn sorted_members(x: &Tensor) -> Tensor {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&i, &j| lex_cmp(x.row(i), x.row(j)));
    x.select_rows(&idx)
}

/// Whether `(x, y)` is already the canonical orientation of the pair.
fn canonical_order(x: &Tensor, y: &Tensor) -> bool {
    x.rows().cmp(&y.rows()).then_with(|| lex_cmp(x.data(), y.data())).is_le()
}

/// `(S_ref - S_a) / S_ref`; `None` when the reference score is not positive.
pub fn skill_score(score: f64, reference: f64) -> Option<f64> {
    if reference > 0.0 && reference.is_finite() && score.is_finite() {
        Some((reference - score) / reference)
    } else {
        None
    }
}

/// Column-wise univariate distances averaged over pixels.
pub fn mean_energy_distance_uni(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_grid(x, y)?;
    let (xt, yt) = (x.transpose(), y.transpose());
    let total: f64 = xt
        .row_iter()
        .zip(yt.row_iter())
        .map(|(a, b)| energy_distance_uni(a, b))
        .sum();
    Ok(total / x.cols() as f64)
}

pub fn mean_wasserstein1_uni(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_grid(x, y)?;
    let (xt, yt) = (x.transpose(), y.transpose());
    let mut total = 0.0;
    for (a, b) in xt.row_iter().zip(yt.row_iter()) {
        total += wasserstein1_uni(a, b)?;
    }
    Ok(total / x.cols() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec())
    }

    #[test]
    fn energy_uni_closed_forms() {
        assert_eq!(energy_distance_uni(&[1.0, 5.0, 2.0], &[5.0, 2.0, 1.0]), 0.0);
        assert!((energy_distance_uni(&[0.0], &[1.0]) - 2f64.sqrt()).abs() < 1e-15);
        // pairs: 2*(1+3+1+1)/4 = 3;  within: (0+2+2+0)/4 = 1 twice
        assert!((energy_distance_uni(&[0.0, 2.0], &[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn energy_multi_reduces_to_uni_in_one_dimension() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let y = [1.1, 0.4, -0.7];
        let a = energy_distance_multi(&col(&x), &col(&y)).unwrap();
        assert!((a - energy_distance_uni(&x, &y)).abs() < 1e-14);
        assert_eq!(energy_distance_multi(&col(&x), &col(&x)).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_shifted() {
        assert!((wasserstein1_uni(&[1.0, 2.0, 3.0], &[4.0, 3.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein1_uni(&[3.0, 1.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(wasserstein1_uni(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sinkhorn_identical_point_masses() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let r = sinkhorn_distance(&x, &x, &SinkhornConfig::default()).unwrap();
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn debiased_sinkhorn_vanishes_on_identical_ensembles_only() {
        let x = Tensor::matrix(4, 2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5, 3.0, 2.0]);
        let cfg = SinkhornConfig::default();
        let same = sinkhorn_distance(&x, &x.select_rows(&[2, 0, 3, 1]), &cfg).unwrap();
        assert!(same.distance < 1e-7, "{}", same.distance);
        assert_eq!(sinkhorn_distance(&x, &x, &cfg).unwrap().distance, 0.0);
        let raw = SinkhornConfig { debias: false, ..cfg };
        assert!(sinkhorn_distance(&x, &x, &raw).unwrap().distance > 0.0);
        let y = x.map(|v| v + 1.0);
        assert!(sinkhorn_distance(&x, &y, &cfg).unwrap().distance > 0.5);
    }

    #[test]
    fn sinkhorn_forced_plan() {
        for eps in [Epsilon::Relative(0.05), Epsilon::Absolute(10.0), Epsilon::Absolute(1e-3)] {
            let cfg = SinkhornConfig {
                epsilon: eps,
                ..Default::default()
            };
            let r = sinkhorn_distance(&col(&[0.0]), &col(&[3.0]), &cfg).unwrap();
            assert!((r.cost - 9.0).abs() < 1e-12);
            assert!((r.distance - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let cfg = SinkhornConfig {
            epsilon: Epsilon::Absolute(1e-3),
            max_iters: 1,
            tolerance: 1e-14,
            debias: false,
        };
        let x = col(&[0.0, 1.0, 5.0]);
        let y = col(&[0.5, 2.0, 3.0]);
        let r = sinkhorn_distance(&x, &y, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn pixel_fields() {
        let x = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let y = Tensor::matrix(3, 2, vec![3.0; 6]);
        assert_eq!(pixel_mean_absdiff(&x, &y).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pixel_mean_absdiff(&x, &x).unwrap(), vec![0.0, 0.0]);
        assert_eq!(pixel_std_diff(&x, &x).unwrap(), vec![0.0, 0.0]);
        let a = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]);
        let b = Tensor::matrix(3, 1, vec![-1.0, 1.0, 3.0]);
        assert!(pixel_std_diff(&a, &b).unwrap()[0] < 0.0);
        assert!(pixel_std_diff(&col(&[1.0]), &a).is_err());
        assert!(pixel_mean_absdiff(&x, &a).is_err());
    }

    #[test]
    fn skill_scores() {
        assert_eq!(skill_score(2.0, 2.0), Some(0.0));
        assert_eq!(skill_score(0.0, 2.0), Some(1.0));
        assert!((skill_score(0.9, 1.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(skill_score(1.0, 0.0), None);
    }
}

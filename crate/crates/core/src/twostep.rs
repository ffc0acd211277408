//! Per-member projection followed by a Gaussian fit in latent space.
//!
//! Each member is encoded on its own, a full-covariance Gaussian is fitted to
//! the `M` codes, and reconstructions are decoded from samples of that
//! Gaussian. The number of samples is independent of `M`.

use serde::{Deserialize, Serialize};

use crate::dense_ae::AeModel;
use crate::error::{Error, Result};
use crate::numerics::{cholesky, Rng, Tensor};
use crate::pca::PcaModel;

/// The encode/decode pair used by the two-step route.
#[derive(Debug, Clone, Copy)]
pub enum Projector<'a> {
    Pca(&'a PcaModel),
    Ae(&'a AeModel),
}

impl Projector<'_> {
    pub fn d_latent(&self) -> usize {
        match self {
            Projector::Pca(p) => p.d_latent(),
            Projector::Ae(a) => a.d_latent(),
        }
    }

    pub fn d_data(&self) -> usize {
        match self {
            Projector::Pca(p) => p.d_data(),
            Projector::Ae(a) => a.d_data(),
        }
    }

    /// Row `m` of the result is the code of member `m`.
    pub fn encode_members(&self, ensemble: &Tensor) -> Result<Tensor> {
        match self {
            Projector::Pca(p) => p.transform(ensemble),
            Projector::Ae(a) => a.encode(ensemble),
        }
    }

    pub fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        match self {
            Projector::Pca(p) => p.inverse_transform(codes),
            Projector::Ae(a) => a.decode(codes),
        }
    }
}

/// `N(mean, cov)` in latent space. `cov` is stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub cov: Tensor,
}

const JITTER_REL: f64 = 1e-6;
const JITTER_FLOOR: f64 = 1e-10;
const JITTER_RETRIES: usize = 3;

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Diagonal Gaussian from per-coordinate standard deviations.
    pub fn diagonal(mean: Vec<f64>, sigma: &[f64]) -> Result<Self> {
        if mean.len() != sigma.len() {
            return Err(Error::shape("LatentGaussian::diagonal", &[mean.len()], &[sigma.len()]));
        }
        let var: Vec<f64> = sigma.iter().map(|s| s * s).collect();
        Ok(Self {
            mean,
            cov: Tensor::from_diag(&var),
        })
    }

    /// Per-coordinate standard deviations, `sqrt(diag(cov))`.
    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov.get(i, i).max(0.0).sqrt()).collect()
    }

    /// The base jitter added to the diagonal before factorization.
    pub fn jitter(&self) -> f64 {
        let d = self.dim().max(1) as f64;
        let trace: f64 = (0..self.dim()).map(|i| self.cov.get(i, i)).sum();
        (JITTER_REL * trace / d).max(JITTER_FLOOR)
    }

    /// Lower Cholesky factor of `cov + jitter * I`, escalating the jitter
    /// tenfold on failure.
    pub fn factor(&self) -> Result<Tensor> {
        let mut jitter = self.jitter();
        let mut last = None;
        for _ in 0..=JITTER_RETRIES {
            let mut a = self.cov.clone();
            for i in 0..self.dim() {
                a.set(i, i, a.get(i, i) + jitter);
            }
            match cholesky(&a) {
                Ok(l) => return Ok(l),
                Err(e) => last = Some(e),
            }
            jitter *= 10.0;
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(s)?;
        let d = g.mean.len();
        if g.cov.dims() != (d, d) || g.cov.len() != d * d {
            return Err(Error::shape("LatentGaussian::from_json", &[d, d], g.cov.shape()));
        }
        Ok(g)
    }
}

/// Member mean and unbiased sample covariance of the codes.
///
/// Sums run over members in index order, so the result only depends on the
/// multiset of rows up to floating-point summation order. Inputs that differ
/// by a member permutation are summed in the same sorted order, which makes
/// the fit exactly permutation invariant.
pub fn fit_latent_gaussian(codes: &Tensor) -> Result<LatentGaussian> {
    let (m, d) = codes.dims();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "a latent Gaussian needs at least 2 codes, got {m}"
        )));
    }
    let mut rows: Vec<&[f64]> = codes.row_iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (acc, v) in mean.iter_mut().zip(r.iter()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = Tensor::zeros(d, d);
    for r in &rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                let c = cov.get(i, j) + di * (r[j] - mean[j]);
                cov.set(i, j, c);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov.get(i, j) / (m - 1) as f64;
            cov.set(i, j, c);
            cov.set(j, i, c);
        }
    }
    Ok(LatentGaussian { mean, cov })
}

/// `n` draws of `mean + L eps`.
pub fn sample_latent(dist: &LatentGaussian, n: usize, rng: &mut Rng) -> Result<Tensor> {
    let l = dist.factor()?;
    let d = dist.dim();
    let mut out = Tensor::zeros(n, d);
    for s in 0..n {
        let eps = rng.normal_vec(d);
        let row = out.row_mut(s);
        for i in 0..d {
            let mut v = dist.mean[i];
            for (k, e) in eps.iter().enumerate().take(i + 1) {
                v += l.get(i, k) * e;
            }
            row[i] = v;
        }
    }
    Ok(out)
}

/// Decodes `n` latent draws into `n` fields.
pub fn reconstruct(proj: Projector<'_>, dist: &LatentGaussian, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if dist.dim() != proj.d_latent() {
        return Err(Error::shape("reconstruct", &[proj.d_latent()], &[dist.dim()]));
    }
    proj.decode(&sample_latent(dist, n, rng)?)
}

/// Encode, fit and decode one ensemble in one call.
pub fn represent(proj: Projector<'_>, ensemble: &Tensor, n: usize, rng: &mut Rng) -> Result<(LatentGaussian, Tensor)> {
    let dist = fit_latent_gaussian(&proj.encode_members(ensemble)?)?;
    let recon = reconstruct(proj, &dist, n, rng)?;
    Ok((dist, recon))
}

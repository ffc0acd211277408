//! Principal component projector fitted on pooled member fields.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{svd_right, Tensor};
use crate::persist::{self, BlobReader, BlobWriter};

const PCA_TAG: [u8; 4] = *b"EPCA";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub feature_mean: Vec<f64>,
    /// `d_latent x d_data`, orthonormal rows.
    pub components: Tensor,
    /// Leading singular values of the centered training matrix.
    pub singular_values: Vec<f64>,
    /// Sum of all sample variances, `sum_i s_i^2 / (N - 1)`.
    pub total_variance: f64,
    pub n_samples: usize,
}

impl PcaModel {
    /// Fits on `N x d_data` rows, each row one member field.
    pub fn fit(train: &Tensor, d_latent: usize) -> Result<Self> {
        let (n, d) = train.dims();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("PCA needs N > 1 samples, got {n}")));
        }
        if d_latent == 0 || d_latent > (n - 1).min(d) {
            return Err(Error::InvalidArgument(format!(
                "d_latent = {d_latent} outside 1..={} for {n} samples of dimension {d}",
                (n - 1).min(d)
            )));
        }
        let mean = train.mean_rows().into_data();
        let mut centered = train.clone();
        for r in 0..n {
            centered
                .row_mut(r)
                .iter_mut()
                .zip(&mean)
                .for_each(|(x, m)| *x -= m);
        }
        let dec = svd_right(&centered)?;
        let denom = (n - 1) as f64;
        let total_variance = dec.s.iter().map(|s| s * s).sum::<f64>() / denom;

        let mut components = Tensor::zeros(d_latent, d);
        for k in 0..d_latent {
            let row = dec.vt.row(k);
            // sign: largest-magnitude loading positive
            let pivot = row
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            components
                .row_mut(k)
                .iter_mut()
                .zip(row)
                .for_each(|(c, v)| *c = sign * v);
        }
        Ok(Self {
            feature_mean: mean,
            components,
            singular_values: dec.s[..d_latent].to_vec(),
            total_variance,
            n_samples: n,
        })
    }

    pub fn d_data(&self) -> usize {
        self.components.cols()
    }

    pub fn d_latent(&self) -> usize {
        self.components.rows()
    }

    /// Codes of each row of `fields` (`M x d_data -> M x d_latent`).
    pub fn transform(&self, fields: &Tensor) -> Result<Tensor> {
        if fields.cols() != self.d_data() {
            return Err(Error::shape("pca transform", fields.shape(), &[self.d_data()]));
        }
        let mut centered = fields.clone();
        for r in 0..centered.rows() {
            centered
                .row_mut(r)
                .iter_mut()
                .zip(&self.feature_mean)
                .for_each(|(x, m)| *x -= m);
        }
        centered.matmul(&self.components.transpose())
    }

    /// Fields of each code row (`M x d_latent -> M x d_data`).
    pub fn inverse_transform(&self, codes: &Tensor) -> Result<Tensor> {
        if codes.cols() != self.d_latent() {
            return Err(Error::shape("pca inverse", codes.shape(), &[self.d_latent()]));
        }
        let mut out = codes.matmul(&self.components)?;
        for r in 0..out.rows() {
            out.row_mut(r)
                .iter_mut()
                .zip(&self.feature_mean)
                .for_each(|(x, m)| *x += m);
        }
        Ok(out)
    }

    /// Fraction of the total variance captured by the first `k` components.
    pub fn explained_variance_ratio(&self, k: usize) -> Result<f64> {
        if k > self.d_latent() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds d_latent = {}",
                self.d_latent()
            )));
        }
        if !(self.total_variance > 0.0) {
            return Err(Error::Degenerate("training data have zero variance".into()));
        }
        let denom = (self.n_samples - 1) as f64;
        let captured: f64 = self.singular_values[..k].iter().map(|s| s * s).sum::<f64>() / denom;
        Ok((captured / self.total_variance).min(1.0))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        BlobWriter::new(PCA_TAG)
            .u32(self.d_data())
            .u32(self.d_latent())
            .u32(self.n_samples)
            .f64s(&self.feature_mean)
            .tensor(&self.components)
            .f64s(&self.singular_values)
            .f64(self.total_variance)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes, PCA_TAG)?;
        let d = r.u32()?;
        let k = r.u32()?;
        let n_samples = r.u32()?;
        let feature_mean = r.f64s(d)?;
        let components = r.tensor(k, d)?;
        let singular_values = r.f64s(k)?;
        let total_variance = r.f64()?;
        r.finish()?;
        Ok(Self {
            feature_mean,
            components,
            singular_values,
            total_variance,
            n_samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

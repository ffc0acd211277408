//! Dense linear-algebra kernels: thin SVD and Cholesky.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Sweep cap of the one-sided Jacobi iteration.
pub const SVD_MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-13;
/// Columns whose norm falls below this fraction of `||a||_F` are treated as zero.
const NEGLIGIBLE_COLUMN: f64 = 1e-13;

/// Thin singular value decomposition `a = u * diag(s) * vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k` with orthonormal columns, `k = min(m, n)`; `None` when not requested.
    pub u: Option<Tensor>,
    /// Non-increasing singular values, length `k`.
    pub s: Vec<f64>,
    /// `k x n` with orthonormal rows.
    pub vt: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let u = self
            .u
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("svd computed without U".into()))?;
        let mut us = u.clone();
        let k = self.s.len();
        for r in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate().take(k) {
                let v = us.get(r, j) * s;
                us.set(r, j, v);
            }
        }
        us.matmul(&self.vt)
    }
}

/// Full thin SVD including the left singular vectors.
pub fn svd(a: &Tensor) -> Result<Svd> {
    svd_impl(a, true)
}

/// Singular values and right singular vectors only; skips forming `U`.
pub fn svd_right(a: &Tensor) -> Result<Svd> {
    svd_impl(a, false)
}

fn svd_impl(a: &Tensor, want_u: bool) -> Result<Svd> {
    let (m, n) = a.dims();
    if m < n {
        // a^T = U' S V'^T  =>  a = V' S U'^T
        let t = svd_tall(&a.transpose(), true)?;
        let u_t = t.u.expect("requested");
        return Ok(Svd {
            u: want_u.then(|| t.vt.transpose()),
            s: t.s,
            vt: u_t.transpose(),
        });
    }
    svd_tall(a, want_u)
}

/// SVD of a matrix with `m >= n`: Householder QR followed by one-sided
/// Jacobi on the square triangular factor.
fn svd_tall(a: &Tensor, want_u: bool) -> Result<Svd> {
    let (m, n) = a.dims();
    let qr = householder_qr(a);
    let r = qr.r();

    // Columns of R are stored as rows of `w` for contiguous access.
    let mut w = r.transpose();
    let mut v = Tensor::identity(n);
    // Rotations preserve the Frobenius norm. A rank-deficient input leaves
    // columns of pure rounding noise whose mutual angles never settle under a
    // relative test, so those are left alone.
    let floor = (NEGLIGIBLE_COLUMN * NEGLIGIBLE_COLUMN) * w.data().iter().map(|x| x * x).sum::<f64>();
    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0
                    || alpha <= floor
                    || beta <= floor
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNotConverged(SVD_MAX_SWEEPS));
    }

    let mut order: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, w.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let s: Vec<f64> = order.iter().map(|&(_, sv)| sv).collect();
    let mut vt = Tensor::zeros(n, n);
    for (k, &(j, _)) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(v.row(j));
    }

    let u = if want_u {
        // Left vectors of R as rows (transposed), completed to an orthonormal set.
        let scale_floor = s.first().copied().unwrap_or(0.0) * 1e-13;
        let mut ur_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for &(j, sv) in &order {
            if sv > scale_floor && sv > 0.0 {
                ur_rows.push(w.row(j).iter().map(|x| x / sv).collect());
            } else {
                ur_rows.push(complete_basis(&ur_rows, n));
            }
        }
        let ur_t = Tensor::from_rows(&ur_rows)?; // k x n, rows = columns of U_R
        let q = qr.thin_q(m);
        Some(q.matmul(&ur_t.transpose())?)
    } else {
        None
    };

    Ok(Svd { u, s, vt })
}

fn rotate_rows(t: &mut Tensor, p: usize, q: usize, c: f64, s: f64) {
    let cols = t.cols();
    let data = t.data_mut();
    let (lo, hi) = data.split_at_mut(q * cols);
    let rp = &mut lo[p * cols..(p + 1) * cols];
    let rq = &mut hi[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// A unit vector orthogonal to every row in `basis`.
fn complete_basis(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    for e in 0..n {
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 0.5 {
            v.iter_mut().for_each(|x| *x /= nrm);
            return v;
        }
    }
    vec![0.0; n]
}

struct HouseholderQr {
    /// Reflected matrix; the upper triangle holds R.
    a: Tensor,
    /// Householder vectors, each of length `m - k`, with scaling `beta`.
    reflectors: Vec<(Vec<f64>, f64)>,
}

fn householder_qr(input: &Tensor) -> HouseholderQr {
    let (m, n) = input.dims();
    let mut a = input.clone();
    let mut reflectors = Vec::with_capacity(n);
    for k in 0..n {
        let mut x: Vec<f64> = (k..m).map(|i| a.get(i, k)).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push((x, 0.0));
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        x[0] -= alpha;
        let vnorm2: f64 = x.iter().map(|v| v * v).sum();
        let beta = if vnorm2 == 0.0 { 0.0 } else { 2.0 / vnorm2 };
        if beta != 0.0 {
            apply_reflector(&mut a, &x, beta, k, k);
        }
        reflectors.push((x, beta));
    }
    HouseholderQr { a, reflectors }
}

/// Applies `I - beta v v^T` to rows `k..` of columns `col0..` of `a`.
fn apply_reflector(a: &mut Tensor, v: &[f64], beta: f64, k: usize, col0: usize) {
    let n = a.cols();
    let mut dots = vec![0.0; n - col0];
    for (i, vi) in v.iter().enumerate() {
        let row = a.row(k + i);
        for (d, x) in dots.iter_mut().zip(&row[col0..]) {
            *d += vi * x;
        }
    }
    for (i, vi) in v.iter().enumerate() {
        let row = a.row_mut(k + i);
        for (x, d) in row[col0..].iter_mut().zip(&dots) {
            *x -= beta * vi * d;
        }
    }
}

impl HouseholderQr {
    fn r(&self) -> Tensor {
        let n = self.a.cols();
        let mut r = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                r.set(i, j, self.a.get(i, j));
            }
        }
        r
    }

    fn thin_q(&self, m: usize) -> Tensor {
        let n = self.a.cols();
        let mut q = Tensor::zeros(m, n);
        for i in 0..n {
            q.set(i, i, 1.0);
        }
        for (k, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            if *beta != 0.0 {
                apply_reflector(&mut q, v, *beta, k, 0);
            }
        }
        q
    }
}

/// Lower-triangular `L` with `L L^T = a`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims();
    if n != c {
        return Err(Error::shape("cholesky", &[n, c], &[c, c]));
    }
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            {
                let li = l.row(i);
                let lj = l.row(j);
                for k in 0..j {
                    sum -= li[k] * lj[k];
                }
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: sum });
                }
                l.set(i, i, sum.sqrt());
            } else {
                let v = sum / l.get(j, j);
                l.set(i, j, v);
            }
        }
    }
    Ok(l)
}

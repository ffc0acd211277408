//! Reverse-mode automatic differentiation over a small set of matrix
//! primitives.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients. Elementwise binary
//! operations broadcast along any axis of extent one.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Bin, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Abs(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumRows(usize),
    MeanRows(usize),
    SumCols(usize),
    LogSumExpRows(usize),
    LogSumExpCols(usize),
    PairwiseDist(usize, usize),
    PairwiseSqDist(usize, usize),
    SliceCols(usize, usize, usize),
    Transpose(usize),
    EntropicOt(Box<OtTrace>),
}

/// Inputs and dual iterates of a fused entropic transport node. `us[t]` and
/// `vs[t + 1]` are the potentials after iteration `t + 1`; `vs[0]` is zero.
#[derive(Debug, Clone)]
struct OtTrace {
    cost: usize,
    eps: usize,
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for a single backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.idx)
    }

    /// Records a trainable parameter; its gradient is always reported.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push(v.idx);
        v
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let f = match kind {
            Bin::Add => |x: f64, y: f64| x + y,
            Bin::Sub => |x: f64, y: f64| x - y,
            Bin::Mul => |x: f64, y: f64| x * y,
            Bin::Div => |x: f64, y: f64| x / y,
        };
        let value = broadcast_zip(&self.nodes[ia].value, &self.nodes[ib].value, f)?;
        Ok(self.push(value, Op::Binary(kind, ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&mut self, a: Var, op: impl Fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(f);
        Ok(self.push(value, op(ia)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |i| Op::Scale(i, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar, |x| x + s)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            |i| Op::LeakyRelu(i, slope),
            |x| if x > 0.0 { x } else { slope * x },
        )
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square, |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |i| Op::Clamp(i, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(value, Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums (reduces over rows): `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let mut out = vec![0.0; t.cols()];
        for row in t.row_iter() {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        Ok(self.push(Tensor::row_vector(out), Op::SumRows(ia)))
    }

    /// Mean over rows: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rows() as f64;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / r)
    }

    /// Mean over rows with the value of [`Tensor::pool_rows`].
    pub fn pool_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.pool_rows();
        Ok(self.push(value, Op::MeanRows(ia)))
    }

    /// Row sums (reduces over columns): `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out: Vec<f64> = t.row_iter().map(|r| r.iter().sum()).collect();
        let rows = out.len();
        Ok(self.push(Tensor::matrix(rows, 1, out), Op::SumCols(ia)))
    }

    /// Row-wise log-sum-exp: `r x c -> r x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let out: Vec<f64> = t.row_iter().map(logsumexp).collect();
        let rows = out.len();
        Ok(self.push(Tensor::matrix(rows, 1, out), Op::LogSumExpRows(ia)))
    }

    /// Column-wise log-sum-exp: `r x c -> 1 x c`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.nodes[ia].value.transpose();
        let out: Vec<f64> = t.row_iter().map(logsumexp).collect();
        Ok(self.push(Tensor::row_vector(out), Op::LogSumExpCols(ia)))
    }

    /// Euclidean distances between the rows of `a` (`m x d`) and `b` (`n x d`).
    ///
    /// The gradient of a zero distance is taken to be zero.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = pairwise_sq(&self.nodes[ia].value, &self.nodes[ib].value)?.map(f64::sqrt);
        Ok(self.push(value, Op::PairwiseDist(ia, ib)))
    }

    /// Squared Euclidean distances between rows.
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = pairwise_sq(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(value, Op::PairwiseSqDist(ia, ib)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if start > end || end > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let rows: Vec<Vec<f64>> = t.row_iter().map(|r| r[start..end].to_vec()).collect();
        let value = if rows.is_empty() {
            Tensor::zeros(0, end - start)
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok(self.push(value, Op::SliceCols(ia, start, end)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.transpose();
        Ok(self.push(value, Op::Transpose(ia)))
    }

    /// Entropic transport cost `<P, C>` between uniform marginals for an
    /// `m x n` cost matrix and a scalar regularization `eps`, with `P` from
    /// log-domain Sinkhorn iterations.
    ///
    /// The iterations run until the L1 row-marginal violation is below
    /// `tolerance` (when positive) or `max_iters` is reached, and the
    /// gradient is that of the unrolled iterations. The whole solve is one
    /// node, so recording it costs no per-iteration allocations.
    pub fn entropic_transport(&mut self, cost: Var, eps: Var, max_iters: usize, tolerance: f64) -> Result<Var> {
        let (ic, ie) = (self.idx(cost)?, self.idx(eps)?);
        let c = &self.nodes[ic].value;
        let e = &self.nodes[ie].value;
        if e.len() != 1 {
            return Err(Error::shape("entropic_transport eps", e.shape(), &[1]));
        }
        if max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        let e = e.data()[0];
        let (m, n) = c.dims();
        let k: Vec<f64> = c.data().iter().map(|x| -(x / e)).collect();
        let (la, lb) = (-(m as f64).ln(), -(n as f64).ln());
        let lab = la + lb;
        let mut us: Vec<Vec<f64>> = Vec::new();
        let mut vs = vec![vec![0.0; n]];
        let mut scratch = vec![0.0; m.max(n)];
        loop {
            let v = vs.last().unwrap();
            let u: Vec<f64> = (0..m)
                .map(|i| {
                    for j in 0..n {
                        scratch[j] = k[i * n + j] + v[j];
                    }
                    -(logsumexp(&scratch[..n]) + lb)
                })
                .collect();
            let v: Vec<f64> = (0..n)
                .map(|j| {
                    for i in 0..m {
                        scratch[i] = k[i * n + j] + u[i];
                    }
                    -(logsumexp(&scratch[..m]) + la)
                })
                .collect();
            let violation = || -> f64 {
                (0..m)
                    .map(|i| {
                        let s: f64 = (0..n).map(|j| (k[i * n + j] + u[i] + v[j] + lab).exp()).sum();
                        (s - 1.0 / m as f64).abs()
                    })
                    .sum()
            };
            let done = us.len() + 1 >= max_iters || (tolerance > 0.0 && violation() < tolerance);
            us.push(u);
            vs.push(v);
            if done {
                break;
            }
        }
        let (u, v) = (us.last().unwrap(), vs.last().unwrap());
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..n {
                total += (k[i * n + j] + u[i] + v[j] + lab).exp() * c.data()[i * n + j];
            }
        }
        let trace = OtTrace { cost: ic, eps: ie, us, vs };
        Ok(self.push(Tensor::scalar(total), Op::EntropicOt(Box::new(trace))))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::matrix(lv.rows(), lv.cols(), vec![1.0]));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::EntropicOt(ref ot) => {
                    let c = &self.nodes[ot.cost].value;
                    let e = &self.nodes[ot.eps].value;
                    let (gc, ge) = ot.backward(c, e.data()[0], g.item());
                    accumulate(&mut grads, ot.cost, gc);
                    accumulate(&mut grads, ot.eps, Tensor::new(e.shape().to_vec(), vec![ge])?);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    accumulate(&mut grads, a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, b, av.transpose().matmul(&g)?);
                }
                Op::Binary(kind, a, b) => {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let (ga, gb) = match kind {
                        Bin::Add => (g.clone(), g.clone()),
                        Bin::Sub => (g.clone(), g.scale(-1.0)),
                        Bin::Mul => (
                            broadcast_zip(&g, bv, |gi, x| gi * x)?,
                            broadcast_zip(&g, av, |gi, x| gi * x)?,
                        ),
                        Bin::Div => {
                            let ga = broadcast_zip(&g, bv, |gi, x| gi / x)?;
                            // -g * a / b^2 == -g * y / b
                            let gy = broadcast_zip(&g, y, |gi, yi| -gi * yi)?;
                            (ga, broadcast_zip(&gy, bv, |v, x| v / x)?)
                        }
                    };
                    accumulate(&mut grads, a, reduce_to(&ga, av.dims()));
                    accumulate(&mut grads, b, reduce_to(&gb, bv.dims()));
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(s)),
                Op::AddScalar(a) => accumulate(&mut grads, a, g.clone()),
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[a].value;
                    let d = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { slope * gi })?;
                    accumulate(&mut grads, a, d);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a].value;
                    let d = g.zip_map(x, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, a, d);
                }
                Op::Exp(a) => accumulate(&mut grads, a, g.zip_map(y, |gi, yi| gi * yi)?),
                Op::Log(a) => {
                    let x = &self.nodes[a].value;
                    accumulate(&mut grads, a, g.zip_map(x, |gi, xi| gi / xi)?);
                }
                Op::Sqrt(a) => {
                    let d = g.zip_map(y, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 })?;
                    accumulate(&mut grads, a, d);
                }
                Op::Square(a) => {
                    let x = &self.nodes[a].value;
                    accumulate(&mut grads, a, g.zip_map(x, |gi, xi| 2.0 * gi * xi)?);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a].value;
                    let d = g.zip_map(x, |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 })?;
                    accumulate(&mut grads, a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a].value.dims();
                    accumulate(&mut grads, a, Tensor::full(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.nodes[a].value.dims();
                    let d = broadcast_zip(&Tensor::zeros(r, c), &g, |_, gi| gi)?;
                    accumulate(&mut grads, a, d);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.nodes[a].value.dims();
                    let inv = 1.0 / r as f64;
                    let d = broadcast_zip(&Tensor::zeros(r, c), &g, |_, gi| gi * inv)?;
                    accumulate(&mut grads, a, d);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.nodes[a].value.dims();
                    let d = broadcast_zip(&Tensor::zeros(r, c), &g, |_, gi| gi)?;
                    accumulate(&mut grads, a, d);
                }
                Op::LogSumExpRows(a) => {
                    let x = &self.nodes[a].value;
                    // softmax_ij = exp(x_ij - y_i)
                    let d = broadcast_zip(x, y, |xi, yi| (xi - yi).exp())?;
                    let d = broadcast_zip(&d, &g, |s, gi| s * gi)?;
                    accumulate(&mut grads, a, d);
                }
                Op::LogSumExpCols(a) => {
                    let x = &self.nodes[a].value;
                    let d = broadcast_zip(x, y, |xi, yi| (xi - yi).exp())?;
                    let d = broadcast_zip(&d, &g, |s, gi| s * gi)?;
                    accumulate(&mut grads, a, d);
                }
                Op::PairwiseDist(a, b) => {
                    let w = g.zip_map(y, |gi, di| if di > 0.0 { gi / di } else { 0.0 })?;
                    let (ga, gb) = pairwise_backward(&self.nodes[a].value, &self.nodes[b].value, &w);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::PairwiseSqDist(a, b) => {
                    let w = g.scale(2.0);
                    let (ga, gb) = pairwise_backward(&self.nodes[a].value, &self.nodes[b].value, &w);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::SliceCols(a, start, end) => {
                    let (r, c) = self.nodes[a].value.dims();
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[start..end].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose()),
            }
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|&p| {
                let (r, c) = self.nodes[p].value.dims();
                let shape = self.nodes[p].value.shape().to_vec();
                match grads.get(p).and_then(|g| g.clone()) {
                    Some(t) => t.reshape(shape),
                    None => Tensor::zeros(r, c).reshape(shape),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            tape: self.id,
            params,
            param_idx: self.params.clone(),
            nodes: grads,
        })
    }
}

impl OtTrace {
    /// Reverse pass through the final plan and every iteration. Returns the
    /// gradients with respect to the cost matrix and `eps`.
    fn backward(&self, c: &Tensor, e: f64, g: f64) -> (Tensor, f64) {
        let (m, n) = c.dims();
        let cd = c.data();
        let k: Vec<f64> = cd.iter().map(|x| -(x / e)).collect();
        let (la, lb) = (-(m as f64).ln(), -(n as f64).ln());
        let t = self.us.len();
        let mut gk = vec![0.0; m * n];
        let mut gc = vec![0.0; m * n];
        let mut gu = vec![0.0; m];
        let mut gv = vec![0.0; n];

        let (u, v) = (&self.us[t - 1], &self.vs[t]);
        for i in 0..m {
            for j in 0..n {
                let ij = i * n + j;
                let p = (k[ij] + u[i] + v[j] + la + lb).exp();
                gc[ij] = g * p;
                let gl = g * cd[ij] * p;
                gk[ij] += gl;
                gu[i] += gl;
                gv[j] += gl;
            }
        }
        for s in (0..t).rev() {
            // v = -(lse_i(K + u) + la): column softmax weights
            let (u, v) = (&self.us[s], &self.vs[s + 1]);
            for i in 0..m {
                for j in 0..n {
                    let ij = i * n + j;
                    let ga = -gv[j] * (k[ij] + u[i] + v[j] + la).exp();
                    gk[ij] += ga;
                    gu[i] += ga;
                }
            }
            gv.iter_mut().for_each(|x| *x = 0.0);
            // u = -(lse_j(K + v_prev) + lb): row softmax weights
            let vp = &self.vs[s];
            for i in 0..m {
                for j in 0..n {
                    let ij = i * n + j;
                    let ga = -gu[i] * (k[ij] + vp[j] + u[i] + lb).exp();
                    gk[ij] += ga;
                    gv[j] += ga;
                }
            }
            gu.iter_mut().for_each(|x| *x = 0.0);
        }
        // K = -C / eps
        let mut ge = 0.0;
        for ij in 0..m * n {
            ge += gk[ij] * cd[ij] / (e * e);
            gc[ij] -= gk[ij] / e;
        }
        (Tensor::matrix(m, n, gc), ge)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => {
            existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(e, x)| *e += x);
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    params: Vec<Tensor>,
    param_idx: Vec<usize>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    /// Gradient of a parameter variable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let pos = self.param_idx.iter().position(|&p| p == v.idx)?;
        self.params.get(pos)
    }

    /// True when the node influenced the loss.
    pub fn reached(&self, v: Var) -> bool {
        v.tape == self.tape && self.nodes.get(v.idx).is_some_and(|g| g.is_some())
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Elementwise `f(a, b)` with broadcasting over unit axes.
pub(crate) fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ra, ca) = a.dims();
    let (rb, cb) = b.dims();
    let (Some(r), Some(c)) = (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) else {
        return Err(Error::shape("broadcast", &[ra, ca], &[rb, cb]));
    };
    if ra == rb && ca == cb {
        return Ok(Tensor::matrix(
            r,
            c,
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i * ca };
        let ib = if rb == 1 { 0 } else { i * cb };
        for j in 0..c {
            let x = ad[ia + if ca == 1 { 0 } else { j }];
            let y = bd[ib + if cb == 1 { 0 } else { j }];
            out.push(f(x, y));
        }
    }
    Ok(Tensor::matrix(r, c, out))
}

/// Sums `g` over the axes that were broadcast to reach it from `dims`.
fn reduce_to(g: &Tensor, dims: (usize, usize)) -> Tensor {
    let (r, c) = g.dims();
    let (tr, tc) = dims;
    if (r, c) == (tr, tc) {
        return g.clone();
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += g.get(i, j);
        }
    }
    Tensor::matrix(tr, tc, out)
}

pub(crate) fn pairwise_sq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.dims();
    let (n, d2) = b.dims();
    if d != d2 {
        return Err(Error::shape("pairwise", &[m, d], &[n, d2]));
    }
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    };
    if n > 0 {
        if m * n * d >= par::PAR_THRESHOLD {
            par::for_each_chunk_mut(&mut out, n, kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// Given weights `w_ij`, returns `(sum_j w_ij (a_i - b_j), -sum_i w_ij (a_i - b_j))`.
fn pairwise_backward(a: &Tensor, b: &Tensor, w: &Tensor) -> (Tensor, Tensor) {
    let (m, d) = a.dims();
    let n = b.rows();
    let mut ga = Tensor::zeros(m, d);
    let mut gb = Tensor::zeros(n, d);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            let bj = b.row(j);
            {
                let gai = ga.row_mut(i);
                for k in 0..d {
                    gai[k] += wij * (ai[k] - bj[k]);
                }
            }
            let gbj = gb.row_mut(j);
            for k in 0..d {
                gbj[k] -= wij * (ai[k] - bj[k]);
            }
        }
    }
    (ga, gb)
}

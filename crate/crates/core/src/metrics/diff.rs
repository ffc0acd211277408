//! Differentiable versions of the multivariate distances, recorded on a
//! [`Tape`].

use super::{SinkhornConfig, EPS_FLOOR};
use crate::error::Result;
use crate::numerics::{Tape, Var};

/// Energy distance between the rows of `x` and `y`.
///
/// Uses the same V-statistic as [`super::energy_distance_multi`]; the
/// squared estimate is clamped at zero and the square root has zero
/// gradient at zero.
pub fn energy_distance(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let m = tape.value(x).rows() as f64;
    let n = tape.value(y).rows() as f64;
    let dxy = tape.pairwise_dist(x, y)?;
    let dxy = tape.sum(dxy)?;
    let dxy = tape.scale(dxy, 2.0 / (m * n))?;
    let dxx = tape.pairwise_dist(x, x)?;
    let dxx = tape.sum(dxx)?;
    let dxx = tape.scale(dxx, 1.0 / (m * m))?;
    let dyy = tape.pairwise_dist(y, y)?;
    let dyy = tape.sum(dyy)?;
    let dyy = tape.scale(dyy, 1.0 / (n * n))?;
    let d2 = tape.sub(dxy, dxx)?;
    let d2 = tape.sub(d2, dyy)?;
    let d2 = tape.clamp(d2, 0.0, f64::INFINITY)?;
    tape.sqrt(d2)
}

/// Square-rooted (optionally debiased) entropic transport cost between the
/// rows of `x` and `y`.
///
/// The gradient is that of the unrolled log-domain iterations. A relative
/// regularization is a function of the cross-cost matrix and is
/// differentiated as such.
pub fn sinkhorn_distance(tape: &mut Tape, x: Var, y: Var, cfg: &SinkhornConfig) -> Result<Var> {
    cfg.validate()?;
    let cost = tape.pairwise_sqdist(x, y)?;
    let eps = match cfg.epsilon {
        super::Epsilon::Relative(r) => {
            let mc = tape.mean(cost)?;
            let e = tape.scale(mc, r)?;
            tape.add_scalar(e, EPS_FLOOR)?
        }
        super::Epsilon::Absolute(e) => tape.constant(crate::numerics::Tensor::scalar(e)),
    };
    let mut total = tape.entropic_transport(cost, eps, cfg.max_iters, cfg.tolerance)?;
    if cfg.debias {
        for (a, b) in [(x, x), (y, y)] {
            let c = tape.pairwise_sqdist(a, b)?;
            let t = tape.entropic_transport(c, eps, cfg.max_iters, cfg.tolerance)?;
            let t = tape.scale(t, 0.5)?;
            total = tape.sub(total, t)?;
        }
    }
    let total = tape.clamp(total, 0.0, f64::INFINITY)?;
    tape.sqrt(total)
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))` from `mu` and `log sigma`.
pub fn kl_std_normal(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, two_ls)?;
    let t = tape.add_scalar(t, -1.0)?;
    let s = tape.sum(t)?;
    tape.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn tape_values_match_plain_routes() {
        let mut rng = Rng::new(21);
        let xa = rng.normal_tensor(5, 3);
        let ya = rng.normal_tensor(4, 3);
        let mut tape = Tape::new();
        let x = tape.constant(xa.clone());
        let y = tape.param(ya.clone());
        let ed = energy_distance(&mut tape, x, y).unwrap();
        let want = metrics::energy_distance_multi(&xa, &ya).unwrap();
        assert!((tape.value(ed).item() - want).abs() < 1e-12);

        // The plain route reorders members, so the two agree once converged.
        for debias in [false, true] {
            let cfg = SinkhornConfig {
                epsilon: metrics::Epsilon::Relative(0.5),
                max_iters: 500,
                tolerance: 0.0,
                debias,
            };
            let sd = sinkhorn_distance(&mut tape, x, y, &cfg).unwrap();
            let want = metrics::sinkhorn_distance(&xa, &ya, &cfg).unwrap().distance;
            assert!((tape.value(sd).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::row_vector(vec![0.0, 0.0]));
        let ls = tape.param(Tensor::row_vector(vec![0.0, 0.0]));
        let kl = kl_std_normal(&mut tape, mu, ls).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        let mu = tape.param(Tensor::scalar(1.0));
        let ls = tape.param(Tensor::scalar(0.0));
        let kl = kl_std_normal(&mut tape, mu, ls).unwrap();
        assert_eq!(tape.value(kl).item(), 0.5);
    }
}

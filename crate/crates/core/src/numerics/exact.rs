//! Correctly rounded sums and means.
//!
//! The running sum is kept as a list of non-overlapping partials whose exact
//! total equals the exact total of the inputs (Shewchuk's algorithm). The
//! result therefore depends only on the multiset of inputs.

/// Exact running sum of floating-point values.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        if !x.is_finite() {
            self.special += x;
            return;
        }
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// The exact total rounded to nearest.
    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // halfway case: the remaining partials decide the direction
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }

    /// `total - q * n` rounded to nearest, with the product taken exactly.
    fn residual(&self, q: f64, n: f64) -> f64 {
        let hi = q * n;
        let lo = q.mul_add(n, -hi);
        let mut r = self.clone();
        r.add(-hi);
        r.add(-lo);
        r.value()
    }
}

/// Mean of `values` rounded from the exact quotient.
///
/// Equal for any reordering of the inputs, for every input repeated twice,
/// and equal to `a` when all inputs are `a`.
pub fn exact_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    let mut count = 0usize;
    for v in values {
        acc.add(v);
        count += 1;
    }
    let n = count as f64;
    let mut q = acc.value() / n;
    if !q.is_finite() || count == 0 {
        return q;
    }
    let mut r = acc.residual(q, n);
    while r != 0.0 {
        let next = if r > 0.0 { q.next_up() } else { q.next_down() };
        let rn = acc.residual(next, n);
        if rn.abs() >= r.abs() {
            break;
        }
        q = next;
        r = rn;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn sum_is_exact_where_naive_sum_is_not() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(v.iter().sum::<f64>(), 0.0);
        let mut s = ExactSum::new();
        v.iter().for_each(|&x| s.add(x));
        assert_eq!(s.value(), 1.0);
        let mut s = ExactSum::new();
        (0..10).for_each(|_| s.add(0.1));
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn mean_of_copies_is_the_value() {
        let mut rng = Rng::new(3);
        for _ in 0..2000 {
            let a = rng.normal() * 10f64.powi(rng.below(20) as i32 - 10);
            let m = 1 + rng.below(60);
            assert_eq!(exact_mean(std::iter::repeat_n(a, m)), a);
        }
    }

    #[test]
    fn mean_ignores_order_and_duplication() {
        let mut rng = Rng::new(4);
        for _ in 0..500 {
            let len = 1 + rng.below(30);
            let v = rng.normal_vec(len);
            let base = exact_mean(v.iter().copied());
            let mut w = v.clone();
            rng.shuffle(&mut w);
            assert_eq!(exact_mean(w.iter().copied()), base);
            assert_eq!(exact_mean(v.iter().chain(&v).copied()), base);
            let naive = v.iter().sum::<f64>() / v.len() as f64;
            assert!((base - naive).abs() <= 1e-14 * (1.0 + naive.abs()));
        }
    }

    #[test]
    fn non_finite_values_propagate() {
        assert!(exact_mean([1.0, f64::NAN]).is_nan());
        assert_eq!(exact_mean([1.0, f64::INFINITY]), f64::INFINITY);
    }
}

//! Quantiles of the F distribution.
//!
//! The CDF is the regularized incomplete beta function,
//! `P(F <= x) = I_y(d1/2, d2/2)` with `y = d1 x / (d1 x + d2)`, and the
//! quantile is found by bisection on `y`. Upper-half probabilities are solved
//! on the complementary variable `1 - y` so the large quantiles keep full
//! relative precision.

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// `x` such that `P(F(d1, d2) <= x) = prob`.
pub fn f_quantile(d1: f64, d2: f64, prob: f64) -> Result<f64> {
    if !(d1 > 0.0 && d2 > 0.0) || !d1.is_finite() || !d2.is_finite() {
        return Err(Error::DegreesOfFreedom(d1, d2));
    }
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::Probability(prob));
    }
    if prob == 0.0 {
        return Ok(0.0);
    }
    let (a, b) = (d1 / 2.0, d2 / 2.0);
    if prob <= 0.5 {
        let y = bisect(|y| beta_reg(a, b, y), prob);
        Ok(d2 * y / (d1 * (1.0 - y)))
    } else {
        // I_{1-y}(b, a) = 1 - I_y(a, b)
        let z = bisect(|z| beta_reg(b, a, z), 1.0 - prob);
        Ok(d2 * (1.0 - z) / (d1 * z))
    }
}

/// Root of the increasing map `g` on (0, 1) at level `target`.
fn bisect(g: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..2000 {
        let mid = if lo > 0.0 && hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(f_quantile(3.0, 4.0, 1.0), Err(Error::Probability(_))));
        assert!(matches!(f_quantile(3.0, 4.0, -0.1), Err(Error::Probability(_))));
        assert!(matches!(f_quantile(0.0, 4.0, 0.5), Err(Error::DegreesOfFreedom(..))));
        assert_eq!(f_quantile(3.0, 4.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_cases() {
        // F(2, 2): CDF = x / (1 + x), so the quantile is p / (1 - p).
        for &p in &[0.1, 0.5, 0.9, 0.95, 0.99] {
            let q = f_quantile(2.0, 2.0, p).unwrap();
            assert!((q - p / (1.0 - p)).abs() < 1e-9 * (1.0 + q), "p={p} q={q}");
        }
        // F(1, 1) median is 1.
        assert!((f_quantile(1.0, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tabulated_upper_points() {
        // Standard 5% upper points.
        for &(d1, d2, want) in &[(1.0, 10.0, 4.9646), (9.0, 9.0, 3.1789), (5.0, 20.0, 2.7109)] {
            let q = f_quantile(d1, d2, 0.95).unwrap();
            assert!((q - want).abs() < 5e-4, "F({d1},{d2}) = {q}");
        }
    }

    #[test]
    fn quantile_is_monotone_in_probability() {
        let mut last = 0.0;
        for i in 1..100 {
            let q = f_quantile(4.0, 7.0, i as f64 / 100.0).unwrap();
            assert!(q > last);
            last = q;
        }
    }
}

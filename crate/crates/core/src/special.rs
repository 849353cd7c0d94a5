//! Gaussian density and log-CDF.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `ln(2 pi) / 2`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Phi(x)`, accurate in both tails.
///
/// Below `x = -37` the complementary error function is near the subnormal
/// range, so the asymptotic Mills-ratio series takes over.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < -37.0 {
        let z = 1.0 / (x * x);
        // 1 - 1/x^2 + 3/x^4 - 15/x^6 + 105/x^8
        let series = 1.0 - z * (1.0 - z * (3.0 - z * (15.0 - z * 105.0)));
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    } else if x > 3.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// `ln(e^a + e^b)`.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln C(n, j)`.
pub fn ln_binom(n: u64, j: u64) -> f64 {
    debug_assert!(j <= n);
    ln_factorial(n) - ln_factorial(j) - ln_factorial(n - j)
}

/// `ln C(n, j)` for `j = 0..=n`, by the ratio recurrence from both ends.
pub fn ln_binom_row(n: u64) -> Vec<f64> {
    let len = n as usize + 1;
    let mut row = vec![0.0; len];
    for j in 0..len / 2 {
        let jf = j as f64;
        row[j + 1] = row[j] + ((n as f64 - jf) / (jf + 1.0)).ln();
    }
    for j in (len / 2 + 1)..len {
        row[j] = row[len - 1 - j];
    }
    row
}

pub fn ln_factorial(n: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((norm_pdf(1.0) - 0.241_970_724_519_143_37).abs() < 1e-16);
    }

    #[test]
    fn log_cdf_is_continuous_at_switches() {
        for &x0 in &[-37.0f64, 3.0] {
            let a = log_norm_cdf(x0 - 1e-9);
            let b = log_norm_cdf(x0 + 1e-9);
            assert!((a - b).abs() < 1e-7 * a.abs().max(1e-12), "{x0}: {a} {b}");
        }
        // ln Phi(-40) from 30-digit arithmetic; Phi(-10) = 7.619853024160527e-24.
        let v = log_norm_cdf(-40.0);
        assert!((v - (-804.608_442_013_753_8)).abs() < 1e-9, "{v}");
        assert!(log_norm_cdf(40.0) == 0.0 || log_norm_cdf(40.0).abs() < 1e-300);
        assert!((log_norm_cdf(10.0) + 7.619_853_024_160_527e-24).abs() < 1e-36);
    }

    #[test]
    fn binomial_logs() {
        assert!((ln_binom(10, 3) - 120f64.ln()).abs() < 1e-12);
        assert_eq!(logaddexp(f64::NEG_INFINITY, 1.0), 1.0);
        for n in [0u64, 1, 7, 40, 1001] {
            let row = ln_binom_row(n);
            for (j, v) in row.iter().enumerate() {
                assert!((v - ln_binom(n, j as u64)).abs() < 1e-10 * v.abs().max(1.0));
            }
        }
        let row = ln_binom_row(20);
        assert!((row[10] - 184_756f64.ln()).abs() < 1e-14);
        assert!((logaddexp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    }
}

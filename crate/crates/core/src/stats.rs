//! Distribution helpers and compensated summation.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, ln_gamma};

/// Inverse CDF of the chi-squared distribution with `df` degrees of freedom.
///
/// Newton iterations on the regularized lower incomplete gamma function,
/// safeguarded by bisection, to a relative error of about 1e-12.
pub fn chi2_quantile(df: usize, prob: f64) -> f64 {
    assert!(df >= 1, "chi2_quantile needs df >= 1");
    assert!(prob > 0.0 && prob < 1.0, "chi2_quantile needs 0 < prob < 1");
    let k = df as f64;
    let a = 0.5 * k;
    let cdf = |x: f64| gamma_lr(a, 0.5 * x);
    let log_norm = a * std::f64::consts::LN_2 + ln_gamma(a);
    let pdf = |x: f64| ((a - 1.0) * x.ln() - 0.5 * x - log_norm).exp();

    // Wilson–Hilferty starting point.
    let z = standard_normal_quantile(prob);
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-300);

    let mut lo = 0.0;
    let mut hi = x.max(1.0);
    while cdf(hi) < prob {
        hi *= 2.0;
    }
    if x > hi {
        x = 0.5 * hi;
    }
    for _ in 0..200 {
        let f = cdf(x) - prob;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let mut next = if d > 0.0 && d.is_finite() { x - f / d } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-14 * x.abs().max(1e-300) {
            return next;
        }
        x = next;
    }
    x
}

/// Inverse CDF of the standard normal distribution.
pub fn standard_normal_quantile(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

/// Neumaier compensated sum; the result depends only on the input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = NeumaierSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_reference_quantiles() {
        // df = 1: square of the two-sided normal quantile.
        let z = standard_normal_quantile(0.975);
        let q1 = chi2_quantile(1, 0.95);
        assert!((q1 - z * z).abs() / q1 < 1e-8);
        assert!((q1 - 3.841458820694124).abs() < 1e-8 * q1);
        // df = 2 is exponential with mean 2.
        let q2 = chi2_quantile(2, 0.95);
        assert!((q2 + 2.0 * 0.05f64.ln()).abs() < 1e-8 * q2);
        assert!((q2 - 5.991464547107979).abs() < 1e-8 * q2);
    }

    #[test]
    fn chi2_quantile_inverts_cdf() {
        for df in [1usize, 2, 3, 7, 20, 150] {
            for p in [1e-6, 0.01, 0.3, 0.5, 0.9, 0.95, 0.999] {
                let q = chi2_quantile(df, p);
                let back = gamma_lr(df as f64 / 2.0, q / 2.0);
                assert!((back - p).abs() < 1e-10, "df {df} p {p}: {back}");
            }
        }
    }

    #[test]
    fn chi2_quantile_vanishes_at_zero_probability() {
        assert!(chi2_quantile(3, 1e-12) < 1e-6);
        assert!(chi2_quantile(1, 1e-15) < 1e-20);
    }

    #[test]
    fn neumaier_recovers_cancelled_mass() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(xs), 2.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

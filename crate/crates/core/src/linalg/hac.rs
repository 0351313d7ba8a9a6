//! Newey–West (Bartlett kernel) long-run variance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::NumericError;

/// Lag truncation for the Bartlett kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `floor(4·(T/100)^(2/9))`.
    #[default]
    Auto,
    Fixed(usize),
}

impl Bandwidth {
    pub fn resolve(self, t: usize) -> usize {
        let l = match self {
            Bandwidth::Auto => (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize,
            Bandwidth::Fixed(l) => l,
        };
        l.min(t.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrvEstimate {
    pub matrix: DMatrix<f64>,
    pub bandwidth: usize,
    /// Set when every column is constant, so the estimate is identically zero.
    pub degenerate: bool,
}

/// Long-run variance of the rows of `series` (T × d), demeaned and scaled by
/// 1/T: `Γ₀ + Σ_{l=1}^{L} (1 − l/(L+1)) (Γ_l + Γ_l')`. The result is
/// symmetrized and its eigenvalues floored at zero.
pub fn hac_lrv(series: &DMatrix<f64>, bandwidth: Bandwidth) -> Result<LrvEstimate, NumericError> {
    let (t, d) = series.shape();
    if t < 2 {
        return Err(NumericError::InvalidInput(format!(
            "long-run variance needs at least 2 observations, got {t}"
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(NumericError::InvalidInput("non-finite series".into()));
    }
    let lags = bandwidth.resolve(t);
    let mut x = series.clone();
    for c in 0..d {
        let mean = x.column(c).sum() / t as f64;
        x.column_mut(c).add_scalar_mut(-mean);
    }
    if x.iter().all(|&v| v == 0.0) {
        return Ok(LrvEstimate {
            matrix: DMatrix::zeros(d, d),
            bandwidth: lags,
            degenerate: true,
        });
    }
    let tf = t as f64;
    let mut s = x.transpose() * &x / tf;
    for l in 1..=lags {
        let head = x.rows(l, t - l);
        let tail = x.rows(0, t - l);
        let gamma = head.transpose() * tail / tf;
        let k = 1.0 - l as f64 / (lags as f64 + 1.0);
        s += (&gamma + gamma.transpose()) * k;
    }
    super::symmetrize(&mut s);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().any(|&e| e < 0.0) {
        let floored = eig.eigenvalues.map(|e| e.max(0.0));
        s = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        super::symmetrize(&mut s);
    }
    Ok(LrvEstimate {
        matrix: s,
        bandwidth: lags,
        degenerate: false,
    })
}

/// Scalar convenience wrapper.
pub fn hac_lrv_scalar(series: &[f64], bandwidth: Bandwidth) -> Result<LrvEstimate, NumericError> {
    hac_lrv(&DMatrix::from_column_slice(series.len(), 1, series), bandwidth)
}

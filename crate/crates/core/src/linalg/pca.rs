//! Principal components for linear factor models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::NumericError;

/// Estimated factor structure `data' ≈ λ μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorFit {
    /// λ̂, periods × rank, normalized so that λ̂'λ̂/T = I.
    pub factors: DMatrix<f64>,
    /// μ̂, rank × units, with μ̂μ̂' diagonal.
    pub loadings: DMatrix<f64>,
    pub rank: usize,
    /// Per-unit sample variance (n − 1 divisor) of the residuals.
    pub residual_variances: DVector<f64>,
    /// All singular values of `data`, descending.
    pub singular_values: DVector<f64>,
}

impl FactorFit {
    /// Fitted values, units × periods.
    pub fn fitted(&self) -> DMatrix<f64> {
        (&self.factors * &self.loadings).transpose()
    }

    /// Residuals of `data` (units × periods) against the fit.
    pub fn residuals(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        data - self.fitted()
    }
}

/// Singular values in descending order.
pub fn singular_values(data: &DMatrix<f64>) -> DVector<f64> {
    if data.is_empty() {
        return DVector::zeros(0);
    }
    let mut s: Vec<f64> = data.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

/// Rank-`rank` principal components of a units × periods matrix.
///
/// With `X = data' = U S V'` (periods × units): `λ̂ = √T·U_r` and
/// `μ̂ = S_r V_r'/√T`. Each factor's sign is fixed so that its first nonzero
/// loading is positive.
pub fn svd_pca(data: &DMatrix<f64>, rank: usize) -> Result<FactorFit, NumericError> {
    let (n, t) = data.shape();
    if n == 0 || t == 0 {
        return Err(NumericError::InvalidInput("empty data matrix".into()));
    }
    if rank > n.min(t) {
        return Err(NumericError::InvalidInput(format!(
            "rank {rank} exceeds min(units, periods) = {}",
            n.min(t)
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(NumericError::InvalidInput("non-finite data".into()));
    }
    let x = data.transpose();
    let svd = x.svd(true, true);
    let u = svd.u.expect("computed");
    let v_t = svd.v_t.expect("computed");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let sv = DVector::from_iterator(order.len(), order.iter().map(|&k| svd.singular_values[k]));

    let tf = t as f64;
    let root_t = tf.sqrt();
    let mut factors = DMatrix::zeros(t, rank);
    let mut loadings = DMatrix::zeros(rank, n);
    for (f, &k) in order.iter().take(rank).enumerate() {
        let mut lam = u.column(k) * root_t;
        let mut mu = v_t.row(k) * (sv[f] / root_t);
        let pivot = mu.iter().copied().find(|m| m.abs() > 1e-12 * sv[0].max(1.0));
        if matches!(pivot, Some(p) if p < 0.0) {
            lam.neg_mut();
            mu.neg_mut();
        }
        factors.set_column(f, &lam);
        loadings.set_row(f, &mu);
    }
    let fitted = (&factors * &loadings).transpose();
    let resid = data - fitted;
    let residual_variances = DVector::from_fn(n, |i, _| {
        if t < 2 {
            return 0.0;
        }
        let row = resid.row(i);
        let mean = row.sum() / tf;
        row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (tf - 1.0)
    });
    Ok(FactorFit {
        factors,
        loadings,
        rank,
        residual_variances,
        singular_values: sv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng))
    }

    fn checks_normalization(fit: &FactorFit, t: usize) {
        let gram = fit.factors.transpose() * &fit.factors / t as f64;
        assert!((gram - DMatrix::identity(fit.rank, fit.rank)).amax() < 1e-8);
        let mm = &fit.loadings * fit.loadings.transpose();
        for a in 0..fit.rank {
            for b in 0..fit.rank {
                if a != b {
                    assert!(mm[(a, b)].abs() < 1e-8 * mm.amax().max(1.0));
                }
            }
        }
    }

    #[test]
    fn exact_rank_one_reconstruction() {
        let u = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let v = DVector::from_vec(vec![0.3, 1.0, -1.0, 2.0, 0.1]);
        let data = &u * v.transpose();
        let fit = svd_pca(&data, 1).unwrap();
        assert!((fit.fitted() - &data).amax() < 1e-10);
        checks_normalization(&fit, 5);
        assert!(fit.loadings[(0, 0)] > 0.0);
    }

    #[test]
    fn full_rank_leaves_no_residual() {
        let data = random(4, 6, 3);
        let fit = svd_pca(&data, 4).unwrap();
        assert!(fit.residuals(&data).amax() < 1e-10);
    }

    #[test]
    fn reconstruction_error_is_discarded_spectrum() {
        let data = random(7, 12, 5);
        let fit = svd_pca(&data, 3).unwrap();
        let err = fit.residuals(&data).norm_squared();
        // Independent oracle: eigenvalues of data·data' are squared singular values.
        let mut ev: Vec<f64> = (&data * data.transpose()).symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        let oracle: f64 = ev[3..].iter().sum();
        assert!((err - oracle).abs() < 1e-9 * oracle.max(1.0));
        checks_normalization(&fit, 12);
    }

    #[test]
    fn rank_zero_returns_data_as_residual() {
        let data = random(3, 5, 9);
        let fit = svd_pca(&data, 0).unwrap();
        assert_eq!(fit.factors.ncols(), 0);
        assert_eq!(fit.residuals(&data), data);
    }

    #[test]
    fn rank_too_large_errors() {
        assert!(svd_pca(&random(3, 5, 1), 4).is_err());
    }
}

use log::debug;
use nalgebra::{DMatrix, DVector};

use super::{assemble, check_roles, gap_periods, resolve_effect_weights, Diagnostics, Effects, EstimationResult, Method};
use crate::error::{EstimationError, Result};
use crate::linalg::pca::singular_values;
use crate::linalg::{pinv_solve, svd_pca, FactorFit};
use crate::panel::{PanelData, RoleAssignment};
use crate::stats::median;

/// Singular values above this multiple of the median count as factors.
pub const SVT_MULTIPLIER: f64 = 2.858;

/// Number of values strictly greater than `2.858 × median(values)`.
pub fn svt_rank(values: &[f64]) -> usize {
    if values.is_empty() {
        return 0;
    }
    let threshold = SVT_MULTIPLIER * median(values);
    values.iter().filter(|&&s| s > threshold).count()
}

/// Singular value thresholding rank estimate for a data matrix.
pub fn estimate_rank_svt(data: &DMatrix<f64>) -> usize {
    svt_rank(singular_values(data).as_slice())
}

/// Factor-model estimator: factors from never-treated units over the role
/// periods, target loadings by least squares on the pre periods, effects
/// `Y₀ₜ − λ̂ₜμ̂₀`.
pub fn factor_estimator(
    p: &PanelData,
    r: &RoleAssignment,
    v: Option<&DVector<f64>>,
    rank: Option<usize>,
) -> Result<(EstimationResult, FactorFit)> {
    check_roles(p, r)?;
    let v = resolve_effect_weights(v, r.t1())?;
    let periods = gap_periods(r);
    let units: Vec<usize> = p
        .never_treated()
        .into_iter()
        .filter(|&i| i != r.unit_of_interest)
        .collect();
    if units.is_empty() {
        return Err(EstimationError::NoControls);
    }
    let data = p.submatrix(&units, &periods);
    let rank = match rank {
        Some(k) => k,
        None => estimate_rank_svt(&data),
    };
    let fit = svd_pca(&data, rank)?;
    let mut diag = Diagnostics {
        factor_rank: Some(rank),
        ..Default::default()
    };

    let pre_rows: Vec<usize> = r
        .pre_periods
        .iter()
        .map(|t| periods.binary_search(t).expect("pre period is a role period"))
        .collect();
    let lam_pre = DMatrix::from_fn(pre_rows.len(), rank, |a, f| fit.factors[(pre_rows[a], f)]);
    let y_pre = DVector::from_vec(p.series(r.unit_of_interest, &r.pre_periods));
    let mu0 = if rank == 0 {
        debug!("estimated factor rank is 0; counterfactual set to zero");
        diag.warnings.push("factor rank 0: counterfactual is zero".into());
        DVector::zeros(0)
    } else {
        pinv_solve(&lam_pre, &y_pre)
    };
    let counterfactual = if rank == 0 {
        DVector::zeros(periods.len())
    } else {
        &fit.factors * &mu0
    };
    let actual = DVector::from_iterator(periods.len(), periods.iter().map(|&t| p.outcome(r.unit_of_interest, t)));
    let gap = &actual - &counterfactual;
    let effects = DVector::from_iterator(
        r.post_periods.len(),
        r.post_periods
            .iter()
            .map(|t| gap[periods.binary_search(t).expect("post period is a role period")]),
    );
    let objective = pre_rows.iter().map(|&a| gap[a].powi(2)).sum::<f64>() / pre_rows.len() as f64;
    let fx = Effects {
        weighted_average: v.dot(&effects),
        effects,
        gap_periods: periods,
        actual,
        synthetic: counterfactual,
        gap_series: gap,
    };
    let mut res = assemble(Method::Factor, r, None, fx, v, objective, None, diag);
    res.controls = units;
    Ok((res, fit))
}

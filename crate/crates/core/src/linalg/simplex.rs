use nalgebra::{DMatrix, DVector};

use super::qp::{solve_simplex_qp, QpOptions, SimplexQp};
use crate::error::NumericError;
use crate::weights::WeightVector;

/// Euclidean projection onto the unit simplex (sort-and-threshold).
pub fn project_simplex_euclidean(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.map(|x| (x - tau).max(0.0))
}

/// Projection of `v` onto the simplex, Euclidean or under the metric
/// `(v − w)'G(v − w)`.
pub fn project_simplex(
    v: &DVector<f64>,
    metric: Option<&DMatrix<f64>>,
) -> Result<WeightVector, NumericError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(NumericError::InvalidInput("non-finite vector to project".into()));
    }
    match metric {
        None => Ok(WeightVector::simplex(&project_simplex_euclidean(v))),
        Some(g) => {
            if g.nrows() != v.len() || g.ncols() != v.len() {
                return Err(NumericError::Dimension(format!(
                    "metric is {}x{}, vector has length {}",
                    g.nrows(),
                    g.ncols(),
                    v.len()
                )));
            }
            let b = g * v;
            let c = v.dot(&b);
            let q = SimplexQp::new(g.clone(), b, c)?;
            let opts = QpOptions::default();
            Ok(solve_simplex_qp(&q, opts.tol, opts.max_iter)?.weights)
        }
    }
}

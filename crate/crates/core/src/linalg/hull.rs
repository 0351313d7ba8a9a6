use nalgebra::{DMatrix, DVector};

use super::qp::{solve_simplex_qp, QpOptions, SimplexQp};
use crate::error::NumericError;
use crate::weights::WeightVector;

/// Outcome of a convex-hull membership test.
#[derive(Debug, Clone)]
pub struct HullMembership {
    pub inside: bool,
    /// Minimizing simplex weights over the points (the certificate).
    pub weights: WeightVector,
    /// `‖target − Σ wᵢ pᵢ‖₂` at the certificate.
    pub distance: f64,
}

/// Tests whether `target` lies within `tol` of the convex hull of the columns
/// of `points` (dimension × count).
pub fn in_convex_hull(
    target: &DVector<f64>,
    points: &DMatrix<f64>,
    tol: f64,
) -> Result<HullMembership, NumericError> {
    if points.nrows() != target.len() {
        return Err(NumericError::Dimension(format!(
            "target has dimension {}, points have dimension {}",
            target.len(),
            points.nrows()
        )));
    }
    if points.ncols() == 0 {
        return Ok(HullMembership {
            inside: false,
            weights: WeightVector::simplex(&DVector::zeros(0)),
            distance: f64::INFINITY,
        });
    }
    let m = points.transpose() * points;
    let b = points.transpose() * target;
    let q = SimplexQp::new(m, b, target.norm_squared())?;
    let opts = QpOptions::default();
    let sol = solve_simplex_qp(&q, 1e-12, opts.max_iter).or_else(|_| solve_simplex_qp(&q, opts.tol, opts.max_iter))?;
    let distance = (target - points * sol.weights.to_dvector()).norm();
    Ok(HullMembership {
        inside: distance <= tol,
        weights: sol.weights,
        distance,
    })
}

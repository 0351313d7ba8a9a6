//! Numerical kernels shared by the estimators.

pub mod hac;
pub mod hull;
pub mod pca;
pub mod qp;
pub mod simplex;

pub use hac::{hac_lrv, hac_lrv_scalar, Bandwidth, LrvEstimate};
pub use hull::{in_convex_hull, HullMembership};
pub use pca::{svd_pca, FactorFit};
pub use qp::{min_norm_quadratic, solve_simplex_qp, QpOptions, QpSolution, SimplexQp};
pub use simplex::{project_simplex, project_simplex_euclidean};

use nalgebra::{DMatrix, DVector};

/// Pseudo-inverse solve `A⁺ b` with the cutoff `max(dim)·eps·σ_max`.
pub(crate) fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    if smax == 0.0 {
        return DVector::zeros(a.ncols());
    }
    svd.solve(b, cutoff).expect("u and v were computed")
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

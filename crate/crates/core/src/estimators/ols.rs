use nalgebra::DVector;

use super::{assemble, check_roles, effects_and_average, pre_mse, resolve_effect_weights, Diagnostics, EstimationResult, Method};
use crate::error::Result;
use crate::linalg::{solve_simplex_qp, QpOptions, SimplexQp};
use crate::panel::{PanelData, RoleAssignment};
use crate::weights::WeightVector;

/// Simplex weights minimizing the pre-period mean squared gap.
pub fn ols_sce(
    p: &PanelData,
    r: &RoleAssignment,
    v: Option<&DVector<f64>>,
    solver: &QpOptions,
) -> Result<EstimationResult> {
    check_roles(p, r)?;
    let v = resolve_effect_weights(v, r.t1())?;
    let t0 = r.t0() as f64;
    let c = p.submatrix(&r.controls, &r.pre_periods);
    let y = DVector::from_vec(p.series(r.unit_of_interest, &r.pre_periods));
    let mut m = &c * c.transpose() / t0;
    crate::linalg::symmetrize(&mut m);
    let b = &c * &y / t0;
    let q = SimplexQp::new(m, b, y.norm_squared() / t0)?;
    let sol = solve_simplex_qp(&q, solver.tol, solver.max_iter)?;
    let w = sol.weights.to_dvector();
    let fx = effects_and_average(&w, p, r, &v);
    let diag = Diagnostics {
        qp_iterations: sol.iterations,
        kkt_residual: Some(sol.kkt_residual),
        unique: Some(sol.unique),
        constrained: true,
        ..Default::default()
    };
    Ok(assemble(Method::Ols, r, Some(sol.weights), fx, v, pre_mse(&w, p, r), None, diag))
}

/// Equal weights `1/J` on every control.
pub fn uniform_sce(p: &PanelData, r: &RoleAssignment, v: Option<&DVector<f64>>) -> Result<EstimationResult> {
    check_roles(p, r)?;
    let v = resolve_effect_weights(v, r.t1())?;
    let weights = WeightVector::uniform(r.n_controls());
    let w = weights.to_dvector();
    let fx = effects_and_average(&w, p, r, &v);
    let diag = Diagnostics {
        constrained: true,
        ..Default::default()
    };
    Ok(assemble(Method::Uniform, r, Some(weights), fx, v, pre_mse(&w, p, r), None, diag))
}

//! Iterative estimator in which every unit gets its own synthetic unit and
//! the moment conditions replace each control's own outcome by an estimate
//! built from all synthetic units.
//!
//! Units are the unit of interest followed by `r.controls`. For unit `i`
//! the moments are `m_j = (1/T₀) Σₜ Y_jt (Y_it − Σ_{h≠i,j} W_h Y_ht − W_j Ŷ_jt)`
//! for `j ≠ i`, weighted by the identity; the fit weight `a_i` is the
//! minimized objective.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{assemble, check_roles, effects_and_average, resolve_effect_weights, Diagnostics, Effects, EstimationResult, Method};
use crate::error::Result;
use crate::linalg::{solve_simplex_qp, QpOptions, SimplexQp};
use crate::panel::{PanelData, RoleAssignment};
use crate::weights::WeightVector;

/// Denominators below this skip the `Ŷ` update for that unit.
pub const POWELL_MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowellConfig {
    pub n_iter: usize,
    pub solver: QpOptions,
}

impl Default for PowellConfig {
    fn default() -> Self {
        Self {
            n_iter: 10,
            solver: QpOptions::default(),
        }
    }
}

/// State of the alternation: `w[(i, j)]` is unit `j`'s weight in unit `i`'s
/// synthetic unit (zero diagonal).
#[derive(Debug, Clone)]
pub(crate) struct PowellState {
    pub w: DMatrix<f64>,
    pub a: DVector<f64>,
    pub y_hat: DMatrix<f64>,
    pub skipped_updates: usize,
}

fn uniform_state(y: &DMatrix<f64>) -> PowellState {
    let n = y.nrows();
    let u = 1.0 / (n - 1) as f64;
    PowellState {
        w: DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { u }),
        a: DVector::from_element(n, 1.0),
        y_hat: y.clone(),
        skipped_updates: 0,
    }
}

/// Closed-form update of the estimated outcomes given weights and fit weights.
pub(crate) fn update_y_hat(y: &DMatrix<f64>, st: &mut PowellState) {
    let n = y.nrows();
    let synth = &st.w * y;
    let mut next = st.y_hat.clone();
    for j in 0..n {
        let mut den = st.a[j];
        for i in 0..n {
            if i != j {
                den += st.a[i] * st.w[(i, j)].powi(2);
            }
        }
        if den < POWELL_MIN_DENOMINATOR {
            st.skipped_updates += 1;
            continue;
        }
        let mut num = synth.row(j) * st.a[j];
        for i in 0..n {
            if i == j || st.w[(i, j)] == 0.0 {
                continue;
            }
            let wij = st.w[(i, j)];
            let partial = y.row(i) - synth.row(i) + y.row(j) * wij;
            num += partial * (st.a[i] * wij);
        }
        next.set_row(j, &(num / den));
    }
    st.y_hat = next;
}

/// Solves the synthetic unit of every unit against the current `Ŷ`.
pub(crate) fn solve_all(y: &DMatrix<f64>, st: &mut PowellState, solver: &QpOptions) -> Result<usize> {
    let n = y.nrows();
    let t0 = y.ncols() as f64;
    let gram = y * y.transpose() / t0;
    let cross = DVector::from_fn(n, |j, _| y.row(j).dot(&st.y_hat.row(j)) / t0);
    let mut iterations = 0;
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let k = others.len();
        let a_vec = DVector::from_fn(k, |r, _| gram[(others[r], i)]);
        let b_mat = DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                cross[others[r]]
            } else {
                gram[(others[r], others[c])]
            }
        });
        let mut m = b_mat.transpose() * &b_mat;
        crate::linalg::symmetrize(&mut m);
        let q = SimplexQp::new(m, b_mat.transpose() * &a_vec, a_vec.norm_squared())?;
        let sol = solve_simplex_qp(&q, solver.tol, solver.max_iter)?;
        iterations += sol.iterations;
        let wi = sol.weights.to_dvector();
        let resid = &a_vec - &b_mat * &wi;
        st.a[i] = resid.norm_squared();
        for (r, &j) in others.iter().enumerate() {
            st.w[(i, j)] = wi[r];
        }
        st.w[(i, i)] = 0.0;
    }
    Ok(iterations)
}

/// Runs the alternation and estimates effects by weighted least squares of
/// each unit's synthetic gap on its differenced treatment indicator, with a
/// separate coefficient per post period and weights `a_i`.
pub fn powell_estimator(
    p: &PanelData,
    r: &RoleAssignment,
    v: Option<&DVector<f64>>,
    cfg: &PowellConfig,
) -> Result<EstimationResult> {
    check_roles(p, r)?;
    let v = resolve_effect_weights(v, r.t1())?;
    let mut units = vec![r.unit_of_interest];
    units.extend(r.controls.iter().copied());
    let n = units.len();
    let y = p.submatrix(&units, &r.pre_periods);
    let mut st = uniform_state(&y);
    let mut diag = Diagnostics {
        constrained: true,
        ..Default::default()
    };
    if n == 2 {
        // Each unit's only possible synthetic unit is the other one.
        st.w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    }
    for _ in 0..cfg.n_iter {
        update_y_hat(&y, &mut st);
        diag.qp_iterations += solve_all(&y, &mut st, &cfg.solver)?;
    }
    if st.skipped_updates > 0 {
        warn!("{} estimated-outcome updates skipped (zero denominator)", st.skipped_updates);
        diag.warnings.push(format!(
            "{} estimated-outcome updates skipped (zero denominator)",
            st.skipped_updates
        ));
    }

    // Post-period regression. Only the unit of interest is treated, so the
    // regressor is 1 for it and −W^i_0 for every other unit.
    let y_post = p.submatrix(&units, &r.post_periods);
    let gaps = &y_post - &st.w * &y_post;
    let x = DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { -st.w[(i, 0)] });
    let mut a = st.a.clone();
    if a.dot(&x.component_mul(&x)) <= POWELL_MIN_DENOMINATOR {
        warn!("all fit weights vanish; using an unweighted regression");
        diag.warnings.push("fit weights vanish: unweighted regression".into());
        a.fill(1.0);
    }
    let den = a.dot(&x.component_mul(&x));
    let effects = DVector::from_fn(r.t1(), |s, _| {
        (0..n).map(|i| a[i] * x[i] * gaps[(i, s)]).sum::<f64>() / den
    });

    let w0 = DVector::from_fn(n - 1, |k, _| st.w[(0, k + 1)]);
    let weights = WeightVector::simplex(&w0);
    let base = effects_and_average(&weights.to_dvector(), p, r, &v);
    let fx = Effects {
        weighted_average: v.dot(&effects),
        effects,
        ..base
    };
    Ok(assemble(Method::Powell, r, Some(weights), fx, v, st.a[0], None, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(n: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> PanelData {
        PanelData::with_integer_periods(
            (0..n).map(|i| format!("u{i}")).collect(),
            &(0..t as i64).collect::<Vec<_>>(),
            DMatrix::from_fn(n, t, f),
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_keep_uniform_weights() {
        let p = panel(5, 12, |i, s| ((i + 2) as f64 * s as f64 * 0.41).sin() + i as f64);
        let r = RoleAssignment::split_at(0, vec![1, 2, 3, 4], vec![], 8, 12);
        let res = powell_estimator(&p, &r, None, &PowellConfig { n_iter: 0, ..Default::default() }).unwrap();
        assert_eq!(res.weights.unwrap().values(), &[0.25; 4]);
    }

    #[test]
    fn exact_system_is_a_fixed_point_of_the_update() {
        // Every unit reproduced exactly by (possibly non-convex) weights on the
        // others: Y0 = (Y1 + Y2)/2, Y1 = 2Y0 − Y2, Y2 = 2Y0 − Y1.
        let y1: Vec<f64> = (0..7).map(|s| (s as f64 * 0.8).cos()).collect();
        let y2: Vec<f64> = (0..7).map(|s| 1.0 + (s as f64 * 0.3).sin()).collect();
        let y = DMatrix::from_fn(3, 7, |i, s| match i {
            0 => 0.5 * (y1[s] + y2[s]),
            1 => y1[s],
            _ => y2[s],
        });
        let mut st = PowellState {
            w: DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 2.0, 0.0, -1.0, 2.0, -1.0, 0.0]),
            a: DVector::from_vec(vec![0.3, 1.7, 0.9]),
            y_hat: y.clone(),
            skipped_updates: 0,
        };
        update_y_hat(&y, &mut st);
        assert!((&st.y_hat - &y).amax() < 1e-12);
    }

    #[test]
    fn exact_target_has_zero_objective_at_truth() {
        // With Ŷ = Y the unit of interest's moments vanish at its true weights.
        let p = panel(4, 15, |i, s| {
            let f1 = (s as f64 * 0.9).sin();
            let f2 = (s as f64 * 0.35).cos();
            match i {
                0 => 0.3 * f1 + 0.7 * f2,
                1 => f1,
                2 => f2,
                _ => f1 - f2 + 2.0,
            }
        });
        let r = RoleAssignment::split_at(0, vec![1, 2, 3], vec![], 10, 15);
        let units = [0usize, 1, 2, 3];
        let y = p.submatrix(&units, &r.pre_periods);
        let mut st = uniform_state(&y);
        solve_all(&y, &mut st, &QpOptions::default()).unwrap();
        assert!(st.a[0] < 1e-14);
        assert!((st.w[(0, 1)] - 0.3).abs() < 1e-6 && (st.w[(0, 2)] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn runs_default_iterations() {
        let p = panel(6, 20, |i, s| ((i + 1) as f64 * 0.37 * s as f64).sin() + 0.1 * i as f64);
        let r = RoleAssignment::split_at(0, vec![1, 2, 3, 4, 5], vec![], 15, 20);
        let res = powell_estimator(&p, &r, None, &PowellConfig::default()).unwrap();
        assert!(res.effects.iter().all(|e| e.is_finite()));
        assert!((res.weighted_average - res.v.dot(&res.effects)).abs() < 1e-12);
    }
}

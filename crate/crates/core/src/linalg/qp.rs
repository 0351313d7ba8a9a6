//! Quadratic programming over the unit simplex.
//!
//! `minimize w'Mw − 2b'w + c  subject to  w ≥ 0, 1'w = 1`
//!
//! The solver runs accelerated projected gradient (FISTA with monotone
//! restart) from the uniform point and periodically hands its iterate to a
//! primal active-set pass that solves the face problem exactly. The
//! active-set pass works in an orthonormal basis of the face's tangent space,
//! so singular face Hessians (common: M has rank at most K+1) are handled by
//! moving along descent directions of the null space up to the boundary.

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::pinv_solve;
use super::simplex::project_simplex_euclidean;
use crate::error::NumericError;
use crate::weights::WeightVector;

/// Problem data for `w'Mw − 2b'w + c` on the simplex.
#[derive(Debug, Clone)]
pub struct SimplexQp {
    m: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    lambda_max: f64,
}

impl SimplexQp {
    /// Validates shapes, finiteness, symmetry (1e-10 relative) and positive
    /// semi-definiteness (eigenvalues ≥ −1e-10·‖M‖). `M` is symmetrized.
    pub fn new(mut m: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self, NumericError> {
        let j = b.len();
        if m.nrows() != j || m.ncols() != j {
            return Err(NumericError::Dimension(format!(
                "M is {}x{} but b has length {j}",
                m.nrows(),
                m.ncols()
            )));
        }
        if j == 0 {
            return Err(NumericError::InvalidInput("empty quadratic program".into()));
        }
        if m.iter().chain(b.iter()).any(|x| !x.is_finite()) || !c.is_finite() {
            return Err(NumericError::InvalidInput("non-finite QP data".into()));
        }
        let mmax = m.amax();
        for r in 0..j {
            for s in (r + 1)..j {
                if (m[(r, s)] - m[(s, r)]).abs() > 1e-10 * mmax.max(f64::MIN_POSITIVE) {
                    return Err(NumericError::InvalidInput(format!(
                        "M is not symmetric at ({r},{s})"
                    )));
                }
            }
        }
        super::symmetrize(&mut m);
        let eig = SymmetricEigen::new(m.clone());
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        let norm = eig.eigenvalues.amax();
        if lmin < -1e-10 * norm {
            return Err(NumericError::InvalidInput(format!(
                "M is not positive semi-definite (smallest eigenvalue {lmin:e})"
            )));
        }
        Ok(Self {
            m,
            b,
            c,
            lambda_max: lmax.max(0.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    /// `w'Mw − 2b'w + c`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        self.objective_core(w) + self.c
    }

    /// Objective without the constant; the solver only compares these.
    fn objective_core(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.m * w)) - 2.0 * self.b.dot(w)
    }

    /// `2(Mw − b)`.
    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.m * w - &self.b) * 2.0
    }

    fn scale(&self) -> f64 {
        let s = self.m.amax().max(self.b.amax());
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Scaled Frank–Wolfe gap `(w'g − min g)/scale`; zero exactly at a KKT point.
    pub fn kkt_residual(&self, w: &DVector<f64>) -> f64 {
        let g = self.gradient(w);
        let gmin = g.min();
        let gap: f64 = w.iter().zip(g.iter()).map(|(wi, gi)| wi * (gi - gmin)).sum();
        gap.max(0.0) / self.scale()
    }
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Result of [`solve_simplex_qp`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub weights: WeightVector,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// False when the Hessian restricted to the active face is (near) singular,
    /// so other minimizers may exist.
    pub unique: bool,
}

/// Minimum-norm minimizer `M⁺b` of the unconstrained quadratic.
pub fn min_norm_quadratic(q: &SimplexQp) -> DVector<f64> {
    pinv_solve(&q.m, &q.b)
}

/// Solves the simplex-constrained QP to a scaled KKT residual of `tol`.
pub fn solve_simplex_qp(q: &SimplexQp, tol: f64, max_iter: usize) -> Result<QpSolution, NumericError> {
    if !(tol > 0.0) {
        return Err(NumericError::InvalidInput("tolerance must be positive".into()));
    }
    let j = q.dim();
    if j == 1 {
        let w = DVector::from_element(1, 1.0);
        return Ok(finish(q, w, 0));
    }
    if q.lambda_max == 0.0 {
        // M = 0: linear objective, minimized at the vertex with largest b.
        let best = q.b.imax();
        let mut w = DVector::zeros(j);
        w[best] = 1.0;
        return Ok(finish(q, w, 0));
    }

    let step = 1.0 / (2.0 * q.lambda_max);
    let mut x = DVector::from_element(j, 1.0 / j as f64);
    let mut fx = q.objective_core(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0usize;
    let mut next_polish = 25usize;
    let mut polished_near = false;
    let mut best_res = q.kkt_residual(&x);
    if best_res <= tol {
        return Ok(finish(q, x, 0));
    }

    while iterations < max_iter {
        iterations += 1;
        let mut xn = project_simplex_euclidean(&(&y - q.gradient(&y) * step));
        let mut fxn = q.objective_core(&xn);
        if fxn > fx {
            // Monotone restart from the last accepted iterate.
            t = 1.0;
            xn = project_simplex_euclidean(&(&x - q.gradient(&x) * step));
            fxn = q.objective_core(&xn);
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &xn + (&xn - &x) * ((t - 1.0) / tn);
        x = xn;
        fx = fxn;
        t = tn;

        let res = q.kkt_residual(&x);
        best_res = best_res.min(res);
        if res <= tol {
            return Ok(safeguard(q, finish(q, x, iterations), tol));
        }
        let near = res < 1e-6 && !polished_near;
        if iterations >= next_polish || near {
            if near {
                polished_near = true;
            }
            if iterations >= next_polish {
                next_polish *= 4;
                polished_near = false;
            }
            if let Some((w, extra)) = active_set(q, &x, tol) {
                let res_w = q.kkt_residual(&w);
                if res_w <= tol {
                    return Ok(safeguard(q, finish(q, w, iterations + extra), tol));
                }
                if q.objective_core(&w) < fx {
                    x = w;
                    fx = q.objective_core(&x);
                    y = x.clone();
                    t = 1.0;
                }
            }
        }
    }
    Err(NumericError::NotConverged {
        iterations,
        residual: best_res,
    })
}

/// Ensures the answer is no worse than the uniform point and every vertex.
fn safeguard(q: &SimplexQp, sol: QpSolution, tol: f64) -> QpSolution {
    let j = q.dim();
    let w = sol.weights.to_dvector();
    let f = q.objective_core(&w);
    let slack = 1e-12 * q.scale();
    let mut best_vertex = None;
    let mut best_val = f - slack;
    for i in 0..j {
        let v = q.m[(i, i)] - 2.0 * q.b[i];
        if v < best_val {
            best_val = v;
            best_vertex = Some(i);
        }
    }
    let uniform = DVector::from_element(j, 1.0 / j as f64);
    let fu = q.objective_core(&uniform);
    let start = match best_vertex {
        Some(i) => {
            let mut e = DVector::zeros(j);
            e[i] = 1.0;
            e
        }
        None if fu < f - slack => uniform,
        None => return sol,
    };
    debug!("simplex QP safeguard triggered; re-polishing from a better start");
    match active_set(q, &start, tol) {
        Some((w2, extra)) if q.objective_core(&w2) <= f => finish(q, w2, sol.iterations + extra),
        _ => finish(q, start, sol.iterations),
    }
}

fn finish(q: &SimplexQp, w: DVector<f64>, iterations: usize) -> QpSolution {
    let weights = WeightVector::simplex(&w);
    let wv = weights.to_dvector();
    let support = weights.support();
    let unique = face_curvature(q, &support) >= 1e-8 * q.lambda_max;
    if !unique {
        debug!(
            "simplex QP optimum may be non-unique: singular Hessian on a face of dimension {}",
            support.len().saturating_sub(1)
        );
    }
    QpSolution {
        objective: q.objective(&wv),
        kkt_residual: q.kkt_residual(&wv),
        weights,
        iterations,
        unique,
    }
}

/// Orthonormal basis (s × s−1) of the complement of the ones vector.
fn tangent_basis(s: usize) -> DMatrix<f64> {
    // Householder reflector mapping e1 to 1/√s; its remaining columns span 1⊥.
    let mut u = DVector::from_element(s, -1.0 / (s as f64).sqrt());
    u[0] += 1.0;
    let uu = u.dot(&u);
    let mut h = DMatrix::identity(s, s);
    if uu > 0.0 {
        h -= (&u * u.transpose()) * (2.0 / uu);
    }
    h.columns(1, s - 1).into_owned()
}

fn sub_hessian(q: &SimplexQp, support: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(support.len(), support.len(), |r, c| q.m[(support[r], support[c])])
}

/// Smallest eigenvalue of the Hessian restricted to the face spanned by
/// `support`; infinite for a vertex.
fn face_curvature(q: &SimplexQp, support: &[usize]) -> f64 {
    let s = support.len();
    if s < 2 {
        return f64::INFINITY;
    }
    let z = tangent_basis(s);
    let h = z.transpose() * sub_hessian(q, support) * &z;
    SymmetricEigen::new(h).eigenvalues.min()
}

/// Primal active-set refinement started from a feasible point. Returns the
/// final point and the number of face steps, or `None` if it stalls.
fn active_set(q: &SimplexQp, start: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, usize)> {
    let j = q.dim();
    let scale = q.scale();
    let mut w = start.clone();
    let mut active: Vec<usize> = (0..j).filter(|&i| w[i] > 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let cap = 10 * j + 50;
    for it in 0..cap {
        let g = q.gradient(&w);
        let s = active.len();
        let mut full_step = true;
        if s >= 2 {
            let z = tangent_basis(s);
            let gs = DVector::from_fn(s, |r, _| g[active[r]]);
            let h = z.transpose() * sub_hessian(q, &active) * &z;
            let r = -(z.transpose() * gs) * 0.5;
            let eig = SymmetricEigen::new(h);
            let lam_abs = eig.eigenvalues.amax();
            let cut = (s as f64) * f64::EPSILON * lam_abs.max(q.lambda_max);
            let coeffs = eig.eigenvectors.transpose() * &r;
            let mut u = DVector::zeros(s - 1);
            let mut r_null = DVector::zeros(s - 1);
            for k in 0..(s - 1) {
                let col = eig.eigenvectors.column(k);
                if eig.eigenvalues[k] > cut {
                    u += col * (coeffs[k] / eig.eigenvalues[k]);
                } else {
                    r_null += col * coeffs[k];
                }
            }
            let unbounded = r_null.norm() > 1e-10 * (r.norm() + scale);
            let p = if unbounded { &z * r_null } else { &z * u };
            if p.amax() > 1e-15 {
                let mut alpha = if unbounded { f64::INFINITY } else { 1.0 };
                let mut blocking = None;
                for (k, &i) in active.iter().enumerate() {
                    if p[k] < 0.0 {
                        let a = w[i] / -p[k];
                        if a < alpha {
                            alpha = a;
                            blocking = Some(k);
                        }
                    }
                }
                if !alpha.is_finite() {
                    return None;
                }
                for (k, &i) in active.iter().enumerate() {
                    w[i] += alpha * p[k];
                }
                if let Some(k) = blocking {
                    w[active[k]] = 0.0;
                    full_step = false;
                }
                let before = active.len();
                active.retain(|&i| {
                    if w[i] <= 0.0 {
                        w[i] = 0.0;
                        false
                    } else {
                        true
                    }
                });
                if active.len() < before {
                    full_step = false;
                }
                if active.is_empty() {
                    return None;
                }
            }
        }
        if !full_step {
            continue;
        }
        // Stationary on the face: check the multipliers of inactive indices.
        let g = q.gradient(&w);
        let nu = active.iter().map(|&i| g[i]).sum::<f64>() / active.len() as f64;
        let mut enter = None;
        let mut most = 0.1 * tol * scale;
        for i in 0..j {
            if !active.contains(&i) && nu - g[i] > most {
                most = nu - g[i];
                enter = Some(i);
            }
        }
        match enter {
            Some(i) => {
                active.push(i);
                active.sort_unstable();
            }
            None => return Some((w, it + 1)),
        }
    }
    None
}

//! Instrument-stacked sample moments and the GMM objective.
//!
//! With `G` the ones row stacked over the instrument pre-period outcomes,
//! `C` the control pre-period outcomes and `y₀` the target pre-period series,
//! the sample moments at weights `w` are `g(w) = G(y₀ − C'w)/T₀` and the
//! objective is `g(w)'A g(w)`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, NumericError, Result};
use crate::linalg::{hac_lrv, solve_simplex_qp, Bandwidth, QpOptions, QpSolution, SimplexQp};
use crate::panel::{validate_roles, PanelData, RoleAssignment};
use crate::weights::WeightVector;

/// Ridge added to a near-singular long-run variance before inversion,
/// relative to its average eigenvalue.
pub const LRV_RIDGE: f64 = 1e-8;
/// Condition number above which the ridge is applied.
pub const LRV_MAX_CONDITION: f64 = 1e12;

/// Choice of moment weighting matrix `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    #[default]
    Identity,
    /// Identity first step, then the inverse long-run variance of the
    /// per-period moment contributions at the first-step weights.
    TwoStep { bandwidth: Bandwidth },
    Custom(DMatrix<f64>),
}

impl WeightingScheme {
    pub fn two_step() -> Self {
        WeightingScheme::TwoStep {
            bandwidth: Bandwidth::Auto,
        }
    }
}

/// Moment data for one role assignment.
#[derive(Debug, Clone)]
pub struct MomentSystem {
    /// `(K+1) × T₀`, first row all ones.
    pub instrument_block: DMatrix<f64>,
    /// `J × T₀`.
    pub control_block: DMatrix<f64>,
    /// `T₀`.
    pub target: DVector<f64>,
    /// `(K+1) × (K+1)`.
    pub weighting: DMatrix<f64>,
}

impl MomentSystem {
    /// Builds a system directly from blocks with identity weighting.
    pub fn from_blocks(instruments: &DMatrix<f64>, controls: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        let t0 = target.len();
        if t0 == 0 {
            return Err(EstimationError::NoPrePeriods);
        }
        if controls.ncols() != t0 || instruments.ncols() != t0 {
            return Err(NumericError::Dimension("moment blocks disagree on T₀".into()).into());
        }
        let k = instruments.nrows();
        let mut g = DMatrix::from_element(k + 1, t0, 1.0);
        g.rows_mut(1, k).copy_from(instruments);
        Ok(Self {
            instrument_block: g,
            control_block: controls,
            target,
            weighting: DMatrix::identity(k + 1, k + 1),
        })
    }

    pub fn t0(&self) -> usize {
        self.target.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control_block.nrows()
    }

    pub fn n_moments(&self) -> usize {
        self.instrument_block.nrows()
    }

    pub fn with_weighting(mut self, a: DMatrix<f64>) -> Result<Self> {
        let k1 = self.n_moments();
        if a.shape() != (k1, k1) {
            return Err(NumericError::Dimension(format!("weighting must be {k1}x{k1}")).into());
        }
        self.weighting = a;
        Ok(self)
    }

    fn residuals(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.target - self.control_block.transpose() * w
    }

    /// Per-period contributions `g_t = G[:,t]·(y₀t − C[:,t]'w)`, T₀ × (K+1).
    pub fn contributions(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let e = self.residuals(w);
        let mut out = self.instrument_block.transpose();
        for (t, mut row) in out.row_iter_mut().enumerate() {
            row *= e[t];
        }
        out
    }
}

/// Extracts the moment blocks for `r`. Two-step weighting starts at the
/// identity; [`reweight_two_step`] supplies the second-step matrix.
pub fn build_moment_system(p: &PanelData, r: &RoleAssignment, weighting: &WeightingScheme) -> Result<MomentSystem> {
    let violations = validate_roles(p, r);
    if !violations.is_empty() {
        return Err(EstimationError::InvalidRoles(violations.len()));
    }
    if r.controls.is_empty() {
        return Err(EstimationError::NoControls);
    }
    if r.pre_periods.is_empty() {
        return Err(EstimationError::NoPrePeriods);
    }
    moment_system_on(p, r, &r.pre_periods, weighting)
}

/// As [`build_moment_system`] but over an arbitrary period list, which may
/// repeat periods. Roles are not validated.
pub(crate) fn moment_system_on(
    p: &PanelData,
    r: &RoleAssignment,
    pre: &[usize],
    weighting: &WeightingScheme,
) -> Result<MomentSystem> {
    let ms = MomentSystem::from_blocks(
        &p.submatrix(&r.instruments, pre),
        p.submatrix(&r.controls, pre),
        DVector::from_vec(p.series(r.unit_of_interest, pre)),
    )?;
    match weighting {
        WeightingScheme::Identity => Ok(ms),
        WeightingScheme::TwoStep { .. } => {
            if ms.t0() < 2 {
                return Err(EstimationError::TwoStepTooShort);
            }
            Ok(ms)
        }
        WeightingScheme::Custom(a) => {
            let k1 = ms.n_moments();
            if a.shape() != (k1, k1) {
                return Err(EstimationError::Config(format!(
                    "custom weighting must be {k1}x{k1}, got {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let mut a = a.clone();
            crate::linalg::symmetrize(&mut a);
            if SymmetricEigen::new(a.clone()).eigenvalues.min() < -1e-10 * a.amax() {
                return Err(EstimationError::Config("custom weighting is not positive semi-definite".into()));
            }
            ms.with_weighting(a)
        }
    }
}

/// `(1/T₀)·G·(y₀ − C'w)`.
pub fn sample_moments(ms: &MomentSystem, w: &DVector<f64>) -> DVector<f64> {
    &ms.instrument_block * ms.residuals(w) / ms.t0() as f64
}

/// `g(w)'A g(w)`, clamped at zero against round-off.
pub fn gmm_objective(ms: &MomentSystem, w: &DVector<f64>) -> f64 {
    let g = sample_moments(ms, w);
    g.dot(&(&ms.weighting * &g)).max(0.0)
}

/// Expands the objective into `w'Mw − 2b'w + c`.
pub fn as_simplex_qp(ms: &MomentSystem) -> Result<SimplexQp> {
    let t2 = (ms.t0() as f64).powi(2);
    let gc = &ms.instrument_block * ms.control_block.transpose();
    let gy = &ms.instrument_block * &ms.target;
    let agc = &ms.weighting * &gc;
    let mut m = gc.transpose() * &agc / t2;
    crate::linalg::symmetrize(&mut m);
    let b = agc.transpose() * &gy / t2;
    let c = gy.dot(&(&ms.weighting * &gy)) / t2;
    Ok(SimplexQp::new(m, b, c)?)
}

/// Diagnostics from the two-step reweighting.
#[derive(Debug, Clone, Serialize)]
pub struct ReweightInfo {
    pub bandwidth: usize,
    pub ridge_applied: bool,
    pub fell_back_to_identity: bool,
}

/// Second-step system with `A` the inverse long-run variance of the
/// per-period moment contributions at `w_first`.
pub fn reweight_two_step(
    ms: &MomentSystem,
    w_first: &DVector<f64>,
    bandwidth: Bandwidth,
) -> Result<(MomentSystem, ReweightInfo)> {
    if ms.t0() < 2 {
        return Err(EstimationError::TwoStepTooShort);
    }
    let lrv = hac_lrv(&ms.contributions(w_first), bandwidth)?;
    let k1 = ms.n_moments();
    let eig = SymmetricEigen::new(lrv.matrix.clone());
    let lmax = eig.eigenvalues.max();
    let mut info = ReweightInfo {
        bandwidth: lrv.bandwidth,
        ridge_applied: false,
        fell_back_to_identity: false,
    };
    if lrv.degenerate || !(lmax > 0.0) {
        warn!("long-run variance of the moments is zero; keeping identity weighting");
        info.fell_back_to_identity = true;
        let mut out = ms.clone();
        out.weighting = DMatrix::identity(k1, k1);
        return Ok((out, info));
    }
    let lmin = eig.eigenvalues.min().max(0.0);
    let mut evals = eig.eigenvalues.clone();
    if lmin == 0.0 || lmax / lmin > LRV_MAX_CONDITION {
        let ridge = LRV_RIDGE * lrv.matrix.trace() / k1 as f64;
        evals.apply(|e| *e = e.max(0.0) + ridge);
        info.ridge_applied = true;
    }
    let inv = evals.map(|e| 1.0 / e);
    let mut a = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    crate::linalg::symmetrize(&mut a);
    let mut out = ms.clone();
    out.weighting = a;
    Ok((out, info))
}

/// Sargan–Hansen statistic with its minimizing weights.
#[derive(Debug, Clone)]
pub struct SarganHansen {
    pub statistic: f64,
    pub weights: WeightVector,
    pub solution: QpSolution,
}

/// `T₀ · min_{w ∈ Δ} g(w)'A g(w)` using the system's own `A`.
pub fn sargan_hansen(ms: &MomentSystem, opts: &QpOptions) -> Result<SarganHansen> {
    let q = as_simplex_qp(ms)?;
    let sol = solve_simplex_qp(&q, opts.tol, opts.max_iter)?;
    let w = sol.weights.to_dvector();
    let statistic = ms.t0() as f64 * gmm_objective(ms, &w);
    Ok(SarganHansen {
        statistic,
        weights: sol.weights.clone(),
        solution: sol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(j: usize, k: usize, t0: usize, seed: u64) -> MomentSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = DMatrix::from_fn(k, t0, |_, _| rng.random_range(-1.0..1.0));
        let ctrl = DMatrix::from_fn(j, t0, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(t0, |_, _| rng.random_range(-1.0..1.0));
        MomentSystem::from_blocks(&inst, ctrl, y).unwrap()
    }

    fn random_simplex(j: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let v = DVector::from_fn(j, |_, _| rng.random_range(0.0..1.0));
        let s = v.sum();
        v / s
    }

    fn toy_panel() -> (PanelData, RoleAssignment) {
        let y = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 2.0, 3.0, //
                0.5, 1.0, 4.0, //
                2.0, 2.0, 2.0, //
                -1.0, 0.0, 1.0,
            ],
        );
        let p = PanelData::with_integer_periods(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            &[1, 2, 3],
            y,
            None,
        )
        .unwrap();
        (p, RoleAssignment::split_at(0, vec![1, 2], vec![3], 2, 3))
    }

    #[test]
    fn blocks_follow_definition() {
        let (p, r) = toy_panel();
        let ms = build_moment_system(&p, &r, &WeightingScheme::Identity).unwrap();
        assert_eq!(ms.instrument_block, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.0]));
        assert_eq!(ms.control_block, DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 2.0, 2.0]));
        assert_eq!(ms.weighting, DMatrix::identity(2, 2));
        let r0 = r.with_partition(vec![1, 2], vec![]);
        let ms0 = build_moment_system(&p, &r0, &WeightingScheme::Identity).unwrap();
        assert_eq!(ms0.instrument_block, DMatrix::from_element(1, 2, 1.0));
    }

    #[test]
    fn moments_match_loop_oracle() {
        let ms = random_system(4, 3, 17, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_simplex(4, &mut rng);
        let g = sample_moments(&ms, &w);
        for row in 0..4 {
            let mut acc = 0.0;
            for t in 0..17 {
                let mut synth = 0.0;
                for j in 0..4 {
                    synth += ms.control_block[(j, t)] * w[j];
                }
                acc += ms.instrument_block[(row, t)] * (ms.target[t] - synth);
            }
            assert!((g[row] - acc / 17.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_moments_are_residual_moments() {
        let ms = random_system(3, 2, 9, 3);
        let mut w = DVector::zeros(3);
        w[1] = 1.0;
        let g = sample_moments(&ms, &w);
        let resid = &ms.target - ms.control_block.row(1).transpose();
        assert!((g[0] - resid.sum() / 9.0).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_gives_zero() {
        let mut ms = random_system(2, 2, 8, 4);
        let w = DVector::from_vec(vec![0.3, 0.7]);
        ms.target = ms.control_block.transpose() * &w;
        assert!(sample_moments(&ms, &w).amax() < 1e-15);
        assert_eq!(gmm_objective(&ms, &w), 0.0);
        let sh = sargan_hansen(&ms, &QpOptions::default()).unwrap();
        assert!(sh.statistic < 1e-12);
    }

    #[test]
    fn quadratic_form_matches_objective() {
        let ms = random_system(5, 3, 30, 5);
        let a = DMatrix::from_fn(4, 4, |r, c| if r == c { 2.0 } else { 0.3 });
        let ms = ms.with_weighting(a).unwrap();
        let q = as_simplex_qp(&ms).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let w = random_simplex(5, &mut rng);
            let g = sample_moments(&ms, &w);
            let direct = g.dot(&(&ms.weighting * &g));
            assert!((q.objective(&w) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_data_gives_zero_quadratic() {
        let ms = MomentSystem::from_blocks(&DMatrix::zeros(1, 4), DMatrix::zeros(2, 4), DVector::zeros(4)).unwrap();
        let q = as_simplex_qp(&ms).unwrap();
        assert!(q.m().iter().all(|&x| x == 0.0) && q.b().iter().all(|&x| x == 0.0) && q.c() == 0.0);
    }

    #[test]
    fn single_control_sargan_hansen_by_hand() {
        // T₀ = 2, one instrument: G = [[1,1],[2,-1]], y₀ = (3,1), C = (1,2).
        let ms = MomentSystem::from_blocks(
            &DMatrix::from_row_slice(1, 2, &[2.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DVector::from_vec(vec![3.0, 1.0]),
        )
        .unwrap();
        // Residuals (2, -1); g = ((2 - 1)/2, (4 + 1)/2) = (0.5, 2.5); SH = 2·(0.25 + 6.25).
        let sh = sargan_hansen(&ms, &QpOptions::default()).unwrap();
        assert!((sh.statistic - 13.0).abs() < 1e-12);
        assert_eq!(sh.weights.values(), &[1.0]);
    }

    #[test]
    fn statistic_invariant_to_control_order() {
        let ms = random_system(4, 5, 40, 7);
        let perm = [2usize, 0, 3, 1];
        let mut shuffled = ms.clone();
        for (r, &src) in perm.iter().enumerate() {
            shuffled.control_block.set_row(r, &ms.control_block.row(src));
        }
        let a = sargan_hansen(&ms, &QpOptions::default()).unwrap().statistic;
        let b = sargan_hansen(&shuffled, &QpOptions::default()).unwrap().statistic;
        assert!((a - b).abs() < 1e-10 * a.max(1.0));
    }

    #[test]
    fn two_step_inverts_known_diagonal_lrv() {
        // Residuals (1,-1,1,-1), instrument chosen so second contribution is
        // (2,2,-2,-2): LRV at bandwidth 0 is diag(1, 4), uncorrelated.
        let ms = MomentSystem::from_blocks(
            &DMatrix::from_row_slice(1, 4, &[2.0, -2.0, -2.0, 2.0]),
            DMatrix::zeros(1, 4),
            DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]),
        )
        .unwrap();
        let (rw, info) = reweight_two_step(&ms, &DVector::from_vec(vec![1.0]), Bandwidth::Fixed(0)).unwrap();
        assert!(!info.ridge_applied);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.25]);
        assert!((rw.weighting - expect).amax() < 1e-12);
    }

    #[test]
    fn two_step_survives_constant_mean_moment() {
        // Constant residuals make the mean contribution constant.
        let ms = MomentSystem::from_blocks(
            &DMatrix::from_row_slice(1, 5, &[1.0, 3.0, -2.0, 0.5, 4.0]),
            DMatrix::zeros(1, 5),
            DVector::from_element(5, 2.0),
        )
        .unwrap();
        let (rw, info) = reweight_two_step(&ms, &DVector::from_vec(vec![1.0]), Bandwidth::Auto).unwrap();
        assert!(info.ridge_applied);
        assert!(rw.weighting.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn two_step_zero_lrv_falls_back() {
        let ms = MomentSystem::from_blocks(&DMatrix::zeros(0, 3), DMatrix::zeros(1, 3), DVector::zeros(3)).unwrap();
        let (rw, info) = reweight_two_step(&ms, &DVector::from_vec(vec![1.0]), Bandwidth::Auto).unwrap();
        assert!(info.fell_back_to_identity);
        assert_eq!(rw.weighting, DMatrix::identity(1, 1));
    }

    #[test]
    fn scaling_outcomes() {
        let ms = random_system(3, 2, 25, 8);
        let s = 1.7f64;
        let scaled = MomentSystem::from_blocks(
            &(ms.instrument_block.rows(1, 2) * s),
            &ms.control_block * s,
            &ms.target * s,
        )
        .unwrap();
        // Mean moment scales by s, instrument products by s².
        let w = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let g = sample_moments(&ms, &w);
        let gs = sample_moments(&scaled, &w);
        assert!((gs[0] - s * g[0]).abs() < 1e-12);
        for k in 1..3 {
            assert!((gs[k] - s * s * g[k]).abs() < 1e-12);
        }
        // With the mean moment weighted out the statistic scales by exactly s⁴.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        let sh = sargan_hansen(&ms.clone().with_weighting(a.clone()).unwrap(), &QpOptions::default()).unwrap();
        let shs = sargan_hansen(&scaled.clone().with_weighting(a).unwrap(), &QpOptions::default()).unwrap();
        assert!((shs.statistic - s.powi(4) * sh.statistic).abs() < 1e-9 * shs.statistic.max(1.0));
        // With the identity it lies between the s² and s⁴ scalings.
        let id = sargan_hansen(&ms, &QpOptions::default()).unwrap().statistic;
        let ids = sargan_hansen(&scaled, &QpOptions::default()).unwrap().statistic;
        assert!(ids >= s * s * id * (1.0 - 1e-9) && ids <= s.powi(4) * id * (1.0 + 1e-9));
    }
}

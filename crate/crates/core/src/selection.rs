//! Splitting never-treated units into controls and instruments.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::estimators::{fit_gmm_weights, GmmConfig};
use crate::moments::build_moment_system;
use crate::panel::{PanelData, RoleAssignment};
use crate::stats::chi2_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Sequential,
    TwoStep,
}

/// One tested control/instrument split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCandidate {
    pub controls: Vec<usize>,
    pub instruments: Vec<usize>,
    pub sh_statistic: Option<f64>,
    pub critical_value: Option<f64>,
    pub df: Option<usize>,
}

impl PartitionCandidate {
    fn new(controls: Vec<usize>, instruments: Vec<usize>) -> Self {
        Self {
            controls,
            instruments,
            sh_statistic: None,
            critical_value: None,
            df: None,
        }
    }

    /// Roles of `base` with this partition substituted.
    pub fn roles(&self, base: &RoleAssignment) -> RoleAssignment {
        base.with_partition(self.controls.clone(), self.instruments.clone())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub chosen: PartitionCandidate,
    pub trace: Vec<PartitionCandidate>,
    /// Sequential only: no candidate passed, the full-control split returned.
    pub no_pass: bool,
    /// Two-step only: stage-1 support was empty.
    pub degenerate: bool,
}

/// Degrees of freedom `max{1, K + 1 − J}`.
pub fn sh_degrees_of_freedom(j: usize, k: usize) -> usize {
    (k + 1).saturating_sub(j).max(1)
}

/// Critical value at significance `alpha` for a split with `j` controls and
/// `k` instruments.
pub fn critical_value(j: usize, k: usize, alpha: f64) -> f64 {
    chi2_quantile(sh_degrees_of_freedom(j, k), 1.0 - alpha)
}

/// Units of `pool` sorted by pre-period `Σ(Y₀ₜ − Yᵢₜ)²/T₀`, ties by index.
pub fn mse_ordering(p: &PanelData, r: &RoleAssignment, pool: &[usize]) -> Vec<usize> {
    let t0 = r.pre_periods.len().max(1) as f64;
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let mse = r
                .pre_periods
                .iter()
                .map(|&t| (p.outcome(r.unit_of_interest, t) - p.outcome(i, t)).powi(2))
                .sum::<f64>()
                / t0;
            (mse, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Nested candidates: the n-th uses the first n ordered units as controls and
/// the rest plus `n1` as instruments, in increasing |J|.
pub fn build_sequential_candidates(ordering: &[usize], n1: &[usize]) -> Vec<PartitionCandidate> {
    (1..=ordering.len())
        .map(|n| {
            let controls = ordering[..n].to_vec();
            let mut instruments = ordering[n..].to_vec();
            instruments.extend_from_slice(n1);
            PartitionCandidate::new(controls, instruments)
        })
        .collect()
}

fn score(p: &PanelData, base: &RoleAssignment, cand: &mut PartitionCandidate, cfg: &GmmConfig) -> Result<f64> {
    let r = cand.roles(base);
    let ms = build_moment_system(p, &r, &cfg.weighting)?;
    let t0 = ms.t0() as f64;
    let fit = fit_gmm_weights(ms, cfg)?;
    let sh = t0 * fit.objective;
    cand.sh_statistic = Some(sh);
    Ok(sh)
}

fn check_pool(pool: &[usize], n1: &[usize]) -> Result<()> {
    if pool.is_empty() {
        return Err(EstimationError::NoControls);
    }
    if pool.iter().any(|u| n1.contains(u)) {
        return Err(EstimationError::Config("candidate pool and extra instruments overlap".into()));
    }
    Ok(())
}

/// Downward testing: the first candidate with `SH < γ` is chosen.
pub fn sequential_select(
    p: &PanelData,
    base: &RoleAssignment,
    pool: &[usize],
    n1: &[usize],
    alpha: f64,
    cfg: &GmmConfig,
) -> Result<SelectionResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EstimationError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    check_pool(pool, n1)?;
    let order = mse_ordering(p, base, pool);
    let mut trace = Vec::new();
    for mut cand in build_sequential_candidates(&order, n1) {
        let sh = score(p, base, &mut cand, cfg)?;
        let df = sh_degrees_of_freedom(cand.controls.len(), cand.instruments.len());
        let gamma = chi2_quantile(df, 1.0 - alpha);
        cand.df = Some(df);
        cand.critical_value = Some(gamma);
        let pass = sh < gamma;
        trace.push(cand);
        if pass {
            return Ok(SelectionResult {
                method: SelectionMethod::Sequential,
                chosen: trace.last().cloned().expect("non-empty"),
                trace,
                no_pass: false,
                degenerate: false,
            });
        }
    }
    warn!("no candidate partition passed the over-identification test; using all controls");
    Ok(SelectionResult {
        method: SelectionMethod::Sequential,
        chosen: trace.last().cloned().expect("pool is non-empty"),
        trace,
        no_pass: true,
        degenerate: false,
    })
}

/// Estimate with every pool unit as a control, then move zero-weight controls
/// to the instruments.
pub fn two_step_select(
    p: &PanelData,
    base: &RoleAssignment,
    pool: &[usize],
    n1: &[usize],
    cfg: &GmmConfig,
) -> Result<SelectionResult> {
    check_pool(pool, n1)?;
    if n1.is_empty() {
        warn!("two-step selection without extra instruments: first stage uses the mean moment only");
    }
    let mut stage1 = PartitionCandidate::new(pool.to_vec(), n1.to_vec());
    let r1 = stage1.roles(base);
    let ms = build_moment_system(p, &r1, &cfg.weighting)?;
    let t0 = ms.t0() as f64;
    let fit = fit_gmm_weights(ms, cfg)?;
    stage1.sh_statistic = Some(t0 * fit.objective);

    let mut support = fit.weights.support();
    let mut degenerate = false;
    if support.is_empty() {
        degenerate = true;
        let best = fit
            .weights
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("pool is non-empty");
        support = vec![best];
    }
    let controls: Vec<usize> = support.iter().map(|&k| pool[k]).collect();
    let mut instruments: Vec<usize> = pool.iter().copied().filter(|u| !controls.contains(u)).collect();
    instruments.extend_from_slice(n1);
    let mut stage2 = PartitionCandidate::new(controls, instruments);
    score(p, base, &mut stage2, cfg)?;
    Ok(SelectionResult {
        method: SelectionMethod::TwoStep,
        chosen: stage2.clone(),
        trace: vec![stage1, stage2],
        no_pass: false,
        degenerate,
    })
}

/// Runs the requested selector.
pub fn select(
    method: SelectionMethod,
    p: &PanelData,
    base: &RoleAssignment,
    pool: &[usize],
    n1: &[usize],
    alpha: f64,
    cfg: &GmmConfig,
) -> Result<SelectionResult> {
    match method {
        SelectionMethod::Sequential => sequential_select(p, base, pool, n1, alpha, cfg),
        SelectionMethod::TwoStep => two_step_select(p, base, pool, n1, cfg),
    }
}

/// Everything a selector needs besides the panel and base roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub method: SelectionMethod,
    /// Never-treated units eligible as controls (N₀).
    pub pool: Vec<usize>,
    /// Units that may only serve as instruments (N₁).
    pub extra_instruments: Vec<usize>,
    pub alpha: f64,
}

impl SelectionSpec {
    pub fn run(&self, p: &PanelData, base: &RoleAssignment, cfg: &GmmConfig) -> Result<SelectionResult> {
        select(self.method, p, base, &self.pool, &self.extra_instruments, self.alpha, cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateReport {
    pub controls: Vec<String>,
    pub instruments: Vec<String>,
    pub sh_statistic: Option<f64>,
    pub critical_value: Option<f64>,
    pub df: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub method: SelectionMethod,
    pub chosen: CandidateReport,
    pub trace: Vec<CandidateReport>,
    pub no_pass: bool,
    pub degenerate: bool,
}

impl SelectionResult {
    pub fn report(&self, p: &PanelData) -> SelectionReport {
        let ids = |v: &[usize]| v.iter().map(|&i| p.unit_ids()[i].clone()).collect();
        let cand = |c: &PartitionCandidate| CandidateReport {
            controls: ids(&c.controls),
            instruments: ids(&c.instruments),
            sh_statistic: c.sh_statistic,
            critical_value: c.critical_value,
            df: c.df,
        };
        SelectionReport {
            method: self.method,
            chosen: cand(&self.chosen),
            trace: self.trace.iter().map(cand).collect(),
            no_pass: self.no_pass,
            degenerate: self.degenerate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn panel(y: DMatrix<f64>) -> PanelData {
        let (n, t) = y.shape();
        PanelData::with_integer_periods(
            (0..n).map(|i| format!("u{i}")).collect(),
            &(0..t as i64).collect::<Vec<_>>(),
            y,
            None,
        )
        .unwrap()
    }

    #[test]
    fn mse_ordering_by_hand() {
        // Unit 1 identical to the target, unit 2 MSE 2.0, unit 3 MSE 0.5.
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.5, 1.5]);
        let p = panel(y);
        let r = RoleAssignment::split_at(0, vec![], vec![], 2, 2);
        assert_eq!(mse_ordering(&p, &r, &[2, 3, 1]), vec![1, 3, 2]);
        // Adding a constant to every unit changes nothing.
        let shifted = panel(p.outcomes().add_scalar(10.0));
        assert_eq!(mse_ordering(&shifted, &r, &[2, 3, 1]), vec![1, 3, 2]);
    }

    #[test]
    fn mse_ties_break_by_index() {
        let y = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, -1.0]);
        let p = panel(y);
        let r = RoleAssignment::split_at(0, vec![], vec![], 1, 1);
        assert_eq!(mse_ordering(&p, &r, &[2, 1]), vec![1, 2]);
    }

    #[test]
    fn candidates_are_nested_prefixes() {
        let c = build_sequential_candidates(&[5, 2, 7], &[]);
        assert_eq!(c.len(), 3);
        assert_eq!(c.iter().map(|x| x.controls.len()).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(c.iter().map(|x| x.instruments.len()).collect::<Vec<_>>(), vec![2, 1, 0]);
        for w in c.windows(2) {
            assert!(w[0].controls.iter().all(|u| w[1].controls.contains(u)));
        }
        let with_n1 = build_sequential_candidates(&[5, 2], &[9]);
        assert_eq!(with_n1[1].instruments, vec![9]);
    }

    #[test]
    fn degrees_of_freedom_floor() {
        assert_eq!(sh_degrees_of_freedom(5, 2), 1);
        assert_eq!(sh_degrees_of_freedom(1, 4), 4);
        assert!((critical_value(5, 2, 0.05) - 3.841458820694124).abs() < 1e-8);
    }

    #[test]
    fn perfect_first_candidate_stops_immediately() {
        let t = 12;
        let y = DMatrix::from_fn(4, t, |i, s| {
            let f = (s as f64 * 0.7).sin();
            match i {
                0 | 1 => f,
                2 => 3.0 * f + 1.0,
                _ => -f + 2.0,
            }
        });
        let p = panel(y);
        let base = RoleAssignment::split_at(0, vec![], vec![], 8, t);
        let res = sequential_select(&p, &base, &[1, 2, 3], &[], 0.05, &GmmConfig::default()).unwrap();
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.chosen.controls, vec![1]);
        assert!(!res.no_pass);
    }

    #[test]
    fn alpha_outside_unit_interval_is_config_error() {
        let p = panel(DMatrix::from_element(2, 3, 1.0));
        let base = RoleAssignment::split_at(0, vec![], vec![], 2, 3);
        assert!(matches!(
            sequential_select(&p, &base, &[1], &[], 1.5, &GmmConfig::default()),
            Err(EstimationError::Config(_))
        ));
    }

    #[test]
    fn two_step_keeps_support() {
        // Target is 0.4·u1 + 0.6·u2 exactly; u3 and u4 are far away.
        let t = 40;
        let y = DMatrix::from_fn(6, t, |i, s| {
            let f1 = (s as f64 * 0.9).sin();
            let f2 = (s as f64 * 0.23).cos();
            match i {
                0 => 0.4 * (f1 + 1.0) + 0.6 * (f2 + 2.0),
                1 => f1 + 1.0,
                2 => f2 + 2.0,
                3 => 4.0 * f1 + 6.0,
                4 => 5.0 * f2 + 7.0,
                _ => f1 - f2,
            }
        });
        let p = panel(y);
        let base = RoleAssignment::split_at(0, vec![], vec![], 30, t);
        let res = two_step_select(&p, &base, &[1, 2, 3, 4], &[5], &GmmConfig::default()).unwrap();
        assert_eq!(res.chosen.controls, vec![1, 2]);
        assert_eq!(res.chosen.instruments, vec![3, 4, 5]);
        assert_eq!(res.trace.len(), 2);
        assert!(res.chosen.controls.iter().all(|u| res.trace[0].controls.contains(u)));
    }
}

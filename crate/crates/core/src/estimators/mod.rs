//! Synthetic control estimators and their shared result type.

mod factor;
mod gmm;
mod ols;
mod powell;

pub use factor::{estimate_rank_svt, factor_estimator, svt_rank, SVT_MULTIPLIER};
pub use gmm::{fit_gmm_weights, gmm_sce, GmmConfig, GmmFit};
pub use ols::{ols_sce, uniform_sce};
pub use powell::{powell_estimator, PowellConfig};

pub use crate::linalg::FactorFit;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::moments::ReweightInfo;
use crate::panel::{validate_roles, PanelData, RoleAssignment};
use crate::weights::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gmm,
    Ols,
    Uniform,
    Factor,
    Powell,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gmm => "gmm",
            Method::Ols => "ols",
            Method::Uniform => "uniform",
            Method::Factor => "factor",
            Method::Powell => "powell",
        }
    }
}

/// Solver and estimator side information.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub qp_iterations: usize,
    pub kkt_residual: Option<f64>,
    pub unique: Option<bool>,
    pub constrained: bool,
    pub weighting: Option<String>,
    pub reweight: Option<ReweightInfo>,
    pub factor_rank: Option<usize>,
    pub warnings: Vec<String>,
}

/// Output of every estimator.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub method: Method,
    /// Unit indices the weights refer to.
    pub controls: Vec<usize>,
    /// Absent for the factor method.
    pub weights: Option<WeightVector>,
    /// `α̂₀ₜ` over the post periods.
    pub effects: DVector<f64>,
    pub weighted_average: f64,
    pub v: DVector<f64>,
    /// Criterion at the solution (GMM objective, pre-period MSE, ...).
    pub objective: f64,
    /// `T₀ ×` objective for GMM.
    pub sh_statistic: Option<f64>,
    /// Sorted union of pre and post periods covered by the gap series.
    pub gap_periods: Vec<usize>,
    pub actual: DVector<f64>,
    pub synthetic: DVector<f64>,
    pub gap_series: DVector<f64>,
    pub diagnostics: Diagnostics,
}

/// Per-period effects, their weighted average and the gap series.
#[derive(Debug, Clone, PartialEq)]
pub struct Effects {
    pub effects: DVector<f64>,
    pub weighted_average: f64,
    pub gap_periods: Vec<usize>,
    pub actual: DVector<f64>,
    pub synthetic: DVector<f64>,
    pub gap_series: DVector<f64>,
}

/// Uniform `1/T₁` unless `v` is given; validates `v ≥ 0`, `Σv = 1`.
pub fn resolve_effect_weights(v: Option<&DVector<f64>>, t1: usize) -> Result<DVector<f64>> {
    if t1 == 0 {
        return Err(EstimationError::NoPostPeriods);
    }
    match v {
        None => Ok(DVector::from_element(t1, 1.0 / t1 as f64)),
        Some(v) => {
            if v.len() != t1 {
                return Err(EstimationError::EffectWeights(format!(
                    "{} weights for {t1} post periods",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(EstimationError::EffectWeights("weights must be finite and non-negative".into()));
            }
            if (v.sum() - 1.0).abs() > 1e-10 {
                return Err(EstimationError::EffectWeights(format!("weights sum to {}", v.sum())));
            }
            Ok(v.clone())
        }
    }
}

pub(crate) fn gap_periods(r: &RoleAssignment) -> Vec<usize> {
    let mut all: Vec<usize> = r.pre_periods.iter().chain(r.post_periods.iter()).copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// `α̂₀ₜ = Y₀ₜ − Σⱼ wⱼ Yⱼₜ` on post periods, `Σ vₜ α̂₀ₜ`, and the gap series on
/// every role period. `weights` are indexed like `r.controls`.
pub fn effects_and_average(weights: &DVector<f64>, p: &PanelData, r: &RoleAssignment, v: &DVector<f64>) -> Effects {
    let synth_at = |t: usize| -> f64 {
        r.controls
            .iter()
            .zip(weights.iter())
            .map(|(&j, &w)| w * p.outcome(j, t))
            .sum()
    };
    let effects = DVector::from_iterator(
        r.post_periods.len(),
        r.post_periods.iter().map(|&t| p.outcome(r.unit_of_interest, t) - synth_at(t)),
    );
    let periods = gap_periods(r);
    let actual = DVector::from_iterator(periods.len(), periods.iter().map(|&t| p.outcome(r.unit_of_interest, t)));
    let synthetic = DVector::from_iterator(periods.len(), periods.iter().map(|&t| synth_at(t)));
    let gap_series = &actual - &synthetic;
    Effects {
        weighted_average: v.dot(&effects),
        effects,
        gap_periods: periods,
        actual,
        synthetic,
        gap_series,
    }
}

/// Role validation shared by all estimators.
pub(crate) fn check_roles(p: &PanelData, r: &RoleAssignment) -> Result<()> {
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
    if r.post_periods.is_empty() {
        return Err(EstimationError::NoPostPeriods);
    }
    Ok(())
}

/// Pre-period mean squared gap of the synthetic unit built from `weights`.
pub(crate) fn pre_mse(weights: &DVector<f64>, p: &PanelData, r: &RoleAssignment) -> f64 {
    let mut acc = 0.0;
    for &t in &r.pre_periods {
        let s: f64 = r
            .controls
            .iter()
            .zip(weights.iter())
            .map(|(&j, &w)| w * p.outcome(j, t))
            .sum();
        acc += (p.outcome(r.unit_of_interest, t) - s).powi(2);
    }
    acc / r.pre_periods.len() as f64
}

pub(crate) fn assemble(
    method: Method,
    r: &RoleAssignment,
    weights: Option<WeightVector>,
    fx: Effects,
    v: DVector<f64>,
    objective: f64,
    sh_statistic: Option<f64>,
    diagnostics: Diagnostics,
) -> EstimationResult {
    EstimationResult {
        method,
        controls: r.controls.clone(),
        weights,
        effects: fx.effects,
        weighted_average: fx.weighted_average,
        v,
        objective,
        sh_statistic,
        gap_periods: fx.gap_periods,
        actual: fx.actual,
        synthetic: fx.synthetic,
        gap_series: fx.gap_series,
        diagnostics,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitWeight {
    pub unit: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PeriodValue {
    pub period: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapRow {
    pub period: String,
    pub actual: f64,
    pub synthetic: f64,
    pub gap: f64,
}

/// JSON view of an [`EstimationResult`] keyed by unit ids and period labels.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationReport {
    pub method: Method,
    pub unit_of_interest: String,
    pub weights: Option<Vec<UnitWeight>>,
    pub on_simplex: Option<bool>,
    pub effects: Vec<PeriodValue>,
    pub weighted_average: f64,
    pub v: Vec<PeriodValue>,
    pub objective: f64,
    pub sh_statistic: Option<f64>,
    pub gap_series: Vec<GapRow>,
    pub diagnostics: Diagnostics,
}

impl EstimationResult {
    /// Weights embedded in the full unit index space (zeros elsewhere).
    pub fn unit_weights(&self, n_units: usize) -> Option<DVector<f64>> {
        let w = self.weights.as_ref()?;
        let mut out = DVector::zeros(n_units);
        for (&j, &x) in self.controls.iter().zip(w.values()) {
            out[j] = x;
        }
        Some(out)
    }

    pub fn gap_rows(&self, p: &PanelData) -> Vec<GapRow> {
        self.gap_periods
            .iter()
            .enumerate()
            .map(|(k, &t)| GapRow {
                period: p.period_labels()[t].clone(),
                actual: self.actual[k],
                synthetic: self.synthetic[k],
                gap: self.gap_series[k],
            })
            .collect()
    }

    pub fn report(&self, p: &PanelData, r: &RoleAssignment) -> EstimationReport {
        let label = |t: usize| p.period_labels()[t].clone();
        EstimationReport {
            method: self.method,
            unit_of_interest: p.unit_ids()[r.unit_of_interest].clone(),
            weights: self.weights.as_ref().map(|w| {
                self.controls
                    .iter()
                    .zip(w.values())
                    .map(|(&j, &x)| UnitWeight {
                        unit: p.unit_ids()[j].clone(),
                        weight: x,
                    })
                    .collect()
            }),
            on_simplex: self.weights.as_ref().map(|w| w.on_simplex()),
            effects: r
                .post_periods
                .iter()
                .zip(self.effects.iter())
                .map(|(&t, &value)| PeriodValue { period: label(t), value })
                .collect(),
            weighted_average: self.weighted_average,
            v: r
                .post_periods
                .iter()
                .zip(self.v.iter())
                .map(|(&t, &value)| PeriodValue { period: label(t), value })
                .collect(),
            objective: self.objective,
            sh_statistic: self.sh_statistic,
            gap_series: self.gap_rows(p),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn panel() -> (PanelData, RoleAssignment) {
        let y = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 5.0, 7.0, 1.0, 1.0, 2.0, 3.0, 0.0, 2.0, 1.0, 1.0]);
        let p = PanelData::with_integer_periods(vec!["t".into(), "a".into(), "b".into()], &[1, 2, 3, 4], y, None)
            .unwrap();
        (p, RoleAssignment::split_at(0, vec![1, 2], vec![], 2, 4))
    }

    #[test]
    fn constant_effects_average() {
        let (mut_p, r) = panel();
        let y = DMatrix::from_fn(3, 4, |i, t| if i == 0 && t >= 2 { 4.0 } else { 1.0 });
        let p = PanelData::new(mut_p.unit_ids().to_vec(), mut_p.period_labels().to_vec(), y, None).unwrap();
        let v = resolve_effect_weights(None, 2).unwrap();
        let fx = effects_and_average(&DVector::from_vec(vec![0.5, 0.5]), &p, &r, &v);
        assert!((fx.weighted_average - 3.0).abs() < 1e-15);
    }

    #[test]
    fn concentrated_v_picks_one_period() {
        let (p, r) = panel();
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let fx = effects_and_average(&DVector::from_vec(vec![0.25, 0.75]), &p, &r, &v);
        assert_eq!(fx.weighted_average, fx.effects[1]);
    }

    #[test]
    fn effects_match_loop_oracle() {
        let (p, r) = panel();
        let w = [0.3, 0.7];
        let v = DVector::from_vec(vec![0.4, 0.6]);
        let fx = effects_and_average(&DVector::from_column_slice(&w), &p, &r, &v);
        let mut avg = 0.0;
        for (k, &t) in [2usize, 3].iter().enumerate() {
            let e = p.outcome(0, t) - (w[0] * p.outcome(1, t) + w[1] * p.outcome(2, t));
            assert!((fx.effects[k] - e).abs() < 1e-12);
            avg += v[k] * e;
        }
        assert!((fx.weighted_average - avg).abs() < 1e-12);
        assert_eq!(fx.gap_series.len(), 4);
        assert!((fx.gap_series[0] - (1.0 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn effect_weights_validation() {
        assert!(resolve_effect_weights(Some(&DVector::from_vec(vec![0.5, 0.6])), 2).is_err());
        assert!(resolve_effect_weights(Some(&DVector::from_vec(vec![-0.5, 1.5])), 2).is_err());
        assert!(resolve_effect_weights(Some(&DVector::from_vec(vec![1.0])), 2).is_err());
        assert!(resolve_effect_weights(None, 0).is_err());
    }
}

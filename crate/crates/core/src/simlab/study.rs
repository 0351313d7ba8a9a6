//! Monte Carlo placebo studies over a fitted process.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assign::{AssignmentMode, TreatmentSampler};
use super::dgp::{simulate_units, FittedDGP, Simulated};
use crate::error::{EstimationError, Result};
use crate::estimators::{factor_estimator, gmm_sce, ols_sce, powell_estimator, uniform_sce, GmmConfig, PowellConfig};
use crate::linalg::{in_convex_hull, QpOptions};
use crate::moments::WeightingScheme;
use crate::panel::RoleAssignment;
use crate::selection::{SelectionMethod, SelectionSpec};
use crate::stats::NeumaierSum;

/// Hull distance (relative to the loading scale) that still counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyEstimator {
    /// GMM with every sampled never-treated unit as a control.
    Gmm,
    GmmSequential,
    GmmTwoStep,
    /// Minimum-norm unconstrained GMM with the extra instruments only.
    GmmUnconstrained,
    Ols,
    Uniform,
    Factor,
    Powell,
    /// Returns the true effects; a check on the scoring.
    Oracle,
}

impl StudyEstimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gmm => "gmm",
            Self::GmmSequential => "gmm_sequential",
            Self::GmmTwoStep => "gmm_two_step",
            Self::GmmUnconstrained => "gmm_unconstrained",
            Self::Ols => "ols",
            Self::Uniform => "uniform",
            Self::Factor => "factor",
            Self::Powell => "powell",
            Self::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyDesign {
    /// Pre-period lengths; one cell per value and per `n0`.
    pub t0: Vec<usize>,
    pub t1: usize,
    /// Numbers of sampled never-treated units.
    pub n0: Vec<usize>,
    /// Other treated units, usable only as instruments.
    pub n1: usize,
    pub reps: usize,
    pub estimators: Vec<StudyEstimator>,
    pub alpha: f64,
    pub weighting: WeightingScheme,
    pub assignment: AssignmentMode,
    /// Effects injected into the unit of interest; zero when absent.
    pub effects: Option<Vec<f64>>,
    pub factor_rank: Option<usize>,
    pub powell_iterations: usize,
    /// Keep per-replication results in the report.
    pub detail: bool,
}

impl Default for StudyDesign {
    fn default() -> Self {
        Self {
            t0: vec![50],
            t1: 50,
            n0: vec![10],
            n1: 0,
            reps: 100,
            estimators: vec![
                StudyEstimator::Ols,
                StudyEstimator::GmmSequential,
                StudyEstimator::Uniform,
                StudyEstimator::Factor,
                StudyEstimator::Powell,
            ],
            alpha: 0.05,
            weighting: WeightingScheme::Identity,
            assignment: AssignmentMode::Uniform,
            effects: None,
            factor_rank: None,
            powell_iterations: 10,
            detail: false,
        }
    }
}

impl StudyDesign {
    pub fn validate(&self, dgp: &FittedDGP) -> Result<()> {
        let bad = |m: String| Err(EstimationError::Config(m));
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if self.t0.is_empty() || self.t0.contains(&0) || self.t1 == 0 {
            return bad("t0 values and t1 must be positive".into());
        }
        if self.n0.is_empty() || self.n0.contains(&0) {
            return bad("n0 values must be positive".into());
        }
        if self.estimators.is_empty() {
            return bad("no estimators listed".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let need = self.n0.iter().max().expect("non-empty") + self.n1 + 1;
        if need > dgp.n_units() {
            return bad(format!("design needs {need} units, the process has {}", dgp.n_units()));
        }
        if let Some(e) = &self.effects {
            if e.len() != self.t1 {
                return bad(format!("{} effects for t1 = {}", e.len(), self.t1));
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize)> {
        self.n0.iter().flat_map(|&n0| self.t0.iter().map(move |&t0| (t0, n0))).collect()
    }
}

/// Effect errors `α̂ₜ − αₜ` and their average for one estimator in one rep.
type Estimate = std::result::Result<(Vec<f64>, f64), String>;

struct CellOutcome {
    feasible: bool,
    estimates: Vec<Estimate>,
}

struct RepOutcome {
    unit_of_interest: usize,
    cells: Vec<CellOutcome>,
}

fn run_estimator(
    which: StudyEstimator,
    sim: &Simulated,
    base: &RoleAssignment,
    design: &StudyDesign,
) -> Result<DVector<f64>> {
    let p = &sim.panel;
    let gmm = GmmConfig {
        weighting: design.weighting.clone(),
        ..Default::default()
    };
    let select = |method| -> Result<RoleAssignment> {
        let spec = SelectionSpec {
            method,
            pool: base.controls.clone(),
            extra_instruments: base.instruments.clone(),
            alpha: design.alpha,
        };
        Ok(spec.run(p, base, &gmm)?.chosen.roles(base))
    };
    let res = match which {
        StudyEstimator::Gmm => gmm_sce(p, base, &gmm, None)?,
        StudyEstimator::GmmSequential => gmm_sce(p, &select(SelectionMethod::Sequential)?, &gmm, None)?,
        StudyEstimator::GmmTwoStep => gmm_sce(p, &select(SelectionMethod::TwoStep)?, &gmm, None)?,
        StudyEstimator::GmmUnconstrained => {
            let cfg = GmmConfig {
                constrained: false,
                ..gmm.clone()
            };
            gmm_sce(p, base, &cfg, None)?
        }
        StudyEstimator::Ols => ols_sce(p, base, None, &QpOptions::default())?,
        StudyEstimator::Uniform => uniform_sce(p, base, None)?,
        StudyEstimator::Factor => factor_estimator(p, base, None, design.factor_rank)?.0,
        StudyEstimator::Powell => {
            let cfg = PowellConfig {
                n_iter: design.powell_iterations,
                ..Default::default()
            };
            powell_estimator(p, base, None, &cfg)?
        }
        StudyEstimator::Oracle => return Ok(DVector::from_vec(sim.truth.effects.clone())),
    };
    Ok(res.effects)
}

fn run_rep(dgp: &FittedDGP, design: &StudyDesign, sampler: &TreatmentSampler, rep: usize, seed: u64) -> Result<RepOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    let assignment = sampler.draw(&mut rng);
    let uoi = assignment.unit_of_interest;
    let instruments: Vec<usize> = assignment.treated.iter().copied().filter(|&u| u != uoi).take(design.n1).collect();
    let remaining: Vec<usize> = (0..dgp.n_units()).filter(|u| !assignment.treated.contains(u)).collect();
    let max_n0 = *design.n0.iter().max().expect("validated");
    if remaining.len() < max_n0 {
        return Err(EstimationError::Config(format!(
            "only {} untreated units left for n0 = {max_n0}",
            remaining.len()
        )));
    }
    let order: Vec<usize> = index::sample(&mut rng, remaining.len(), max_n0).iter().map(|k| remaining[k]).collect();
    let sim_seed = rng.next_u64();
    let scale = dgp.loadings.amax().max(1.0);
    let target = dgp.loading(uoi);

    let mut cells = Vec::new();
    for (t0, n0) in design.cells() {
        let controls = &order[..n0];
        let mut units = vec![uoi];
        units.extend_from_slice(controls);
        units.extend_from_slice(&instruments);
        let treated: Vec<bool> = (0..units.len()).map(|k| k == 0 || k > n0).collect();
        let sim = simulate_units(dgp, &units, &treated, t0, design.t1, design.effects.as_deref(), sim_seed)?;
        let base = RoleAssignment::split_at(
            0,
            (1..=n0).collect(),
            (n0 + 1..units.len()).collect(),
            t0,
            t0 + design.t1,
        );
        let points = dgp.loadings.select_columns(controls);
        let feasible = in_convex_hull(&target, &points, FEASIBILITY_TOL * scale).map(|h| h.inside).unwrap_or(false);
        let estimates = design
            .estimators
            .iter()
            .map(|&which| {
                run_estimator(which, &sim, &base, design)
                    .map(|fx| {
                        let err: Vec<f64> = fx.iter().zip(&sim.truth.effects).map(|(a, b)| a - b).collect();
                        let avg = err.iter().sum::<f64>() / err.len() as f64;
                        (err, avg)
                    })
                    .map_err(|e| e.to_string())
            })
            .collect();
        cells.push(CellOutcome { feasible, estimates });
    }
    Ok(RepOutcome {
        unit_of_interest: uoi,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorMetrics {
    pub estimator: StudyEstimator,
    pub completed: usize,
    pub failed: usize,
    /// Mean of `ᾱ̂ − ᾱ` over completed reps.
    pub bias: f64,
    pub bias_magnitude: f64,
    pub mse_alpha_t: f64,
    pub mse_alpha_bar: f64,
    /// Mean of `α̂ₜ − αₜ` for each post period.
    pub per_period_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellReport {
    pub t0: usize,
    pub n0: usize,
    pub n1: usize,
    pub reps: usize,
    pub feasible: usize,
    pub feasibility_rate: f64,
    pub metrics: Vec<EstimatorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepEstimate {
    pub estimator: StudyEstimator,
    pub average_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepDetail {
    pub rep: usize,
    pub t0: usize,
    pub n0: usize,
    pub unit_of_interest: String,
    pub feasible: bool,
    pub estimates: Vec<RepEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub seed: u64,
    pub design: StudyDesign,
    pub cells: Vec<CellReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Vec<RepDetail>>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    t0: usize,
    n0: usize,
    n1: usize,
    estimator: &'a str,
    reps: usize,
    completed: usize,
    failed: usize,
    bias: f64,
    bias_magnitude: f64,
    mse_alpha_t: f64,
    mse_alpha_bar: f64,
    feasibility_rate: f64,
}

impl SimReport {
    pub fn metrics(&self, t0: usize, n0: usize, estimator: StudyEstimator) -> Option<&EstimatorMetrics> {
        self.cells
            .iter()
            .find(|c| c.t0 == t0 && c.n0 == n0)?
            .metrics
            .iter()
            .find(|m| m.estimator == estimator)
    }

    /// One row per cell and estimator.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for c in &self.cells {
            for m in &c.metrics {
                w.serialize(CsvRow {
                    t0: c.t0,
                    n0: c.n0,
                    n1: c.n1,
                    estimator: m.estimator.name(),
                    reps: c.reps,
                    completed: m.completed,
                    failed: m.failed,
                    bias: m.bias,
                    bias_magnitude: m.bias_magnitude,
                    mse_alpha_t: m.mse_alpha_t,
                    mse_alpha_bar: m.mse_alpha_bar,
                    feasibility_rate: c.feasibility_rate,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every replication (in parallel, each on its own seed stream) and
/// averages the metrics in replication order, so results do not depend on
/// the thread count. Estimator failures are counted, never fatal.
pub fn run_study(dgp: &FittedDGP, design: &StudyDesign, seed: u64) -> Result<SimReport> {
    design.validate(dgp)?;
    let sampler = TreatmentSampler::new(dgp, design.n1 + 1, &design.assignment)?;
    let reps: Vec<RepOutcome> = (0..design.reps)
        .into_par_iter()
        .map(|rep| run_rep(dgp, design, &sampler, rep, seed))
        .collect::<Result<_>>()?;

    let t1 = design.t1;
    let cells = design.cells();
    let mut reports = Vec::with_capacity(cells.len());
    for (ci, &(t0, n0)) in cells.iter().enumerate() {
        let feasible = reps.iter().filter(|r| r.cells[ci].feasible).count();
        let mut metrics = Vec::new();
        for (ei, &estimator) in design.estimators.iter().enumerate() {
            let mut bias = NeumaierSum::default();
            let mut sq_bar = NeumaierSum::default();
            let mut sq_t = NeumaierSum::default();
            let mut per_period = vec![NeumaierSum::default(); t1];
            let mut completed = 0;
            for r in &reps {
                if let Ok((err, avg)) = &r.cells[ci].estimates[ei] {
                    completed += 1;
                    bias.add(*avg);
                    sq_bar.add(avg * avg);
                    sq_t.add(err.iter().map(|e| e * e).sum::<f64>() / t1 as f64);
                    for (acc, e) in per_period.iter_mut().zip(err) {
                        acc.add(*e);
                    }
                }
            }
            let n = completed.max(1) as f64;
            let b = if completed > 0 { bias.value() / n } else { f64::NAN };
            metrics.push(EstimatorMetrics {
                estimator,
                completed,
                failed: reps.len() - completed,
                bias: b,
                bias_magnitude: b.abs(),
                mse_alpha_t: if completed > 0 { sq_t.value() / n } else { f64::NAN },
                mse_alpha_bar: if completed > 0 { sq_bar.value() / n } else { f64::NAN },
                per_period_bias: per_period.iter().map(|s| s.value() / n).collect(),
            });
        }
        reports.push(CellReport {
            t0,
            n0,
            n1: design.n1,
            reps: reps.len(),
            feasible,
            feasibility_rate: feasible as f64 / reps.len() as f64,
            metrics,
        });
    }

    let detail = design.detail.then(|| {
        reps.iter()
            .enumerate()
            .flat_map(|(rep, r)| {
                cells.iter().zip(&r.cells).map(move |(&(t0, n0), c)| RepDetail {
                    rep,
                    t0,
                    n0,
                    unit_of_interest: dgp.unit_ids[r.unit_of_interest].clone(),
                    feasible: c.feasible,
                    estimates: design
                        .estimators
                        .iter()
                        .zip(&c.estimates)
                        .map(|(&estimator, e)| RepEstimate {
                            estimator,
                            average_error: e.as_ref().ok().map(|x| x.1),
                            error: e.as_ref().err().cloned(),
                        })
                        .collect(),
                })
            })
            .collect()
    });
    Ok(SimReport {
        seed,
        design: design.clone(),
        cells: reports,
        detail,
    })
}

//! Treatment assignment for placebo studies.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dgp::FittedDGP;
use crate::error::{EstimationError, Result};

pub const LOGISTIC_RIDGE: f64 = 1e-6;
pub const LOGISTIC_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AssignmentMode {
    /// Treated units drawn without replacement with equal probability.
    Uniform,
    /// Probabilities proportional to a logistic fit of `labels` on the loadings.
    Logistic { labels: Vec<bool> },
    /// The given unit is always the unit of interest; any further treated
    /// units are drawn uniformly.
    Fixed { unit: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub treated: Vec<usize>,
    pub unit_of_interest: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub iterations: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn penalized_loglik(x: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    // log σ(s) = −ln(1 + e^{−s}) with s = ±η.
    let ll: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| -softplus(if yi { -e } else { e }))
        .sum();
    ll - 0.5 * ridge * beta.norm_squared()
}

/// Logistic regression of `y` on `[1, x]` by damped Newton iterations with
/// ridge penalty `ridge·‖β‖²/2` on all coefficients.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], ridge: f64) -> Result<LogisticFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(EstimationError::Config(format!("{} labels for {n} units", y.len())));
    }
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut beta = DVector::zeros(k + 1);
    let mut obj = penalized_loglik(&design, y, &beta, ridge);
    for it in 1..=LOGISTIC_MAX_ITER {
        let prob = (&design * &beta).map(sigmoid);
        let resid = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 } - prob[i]);
        let grad = design.transpose() * resid - &beta * ridge;
        let mut hess = DMatrix::from_diagonal_element(k + 1, k + 1, ridge);
        for i in 0..n {
            let wi = prob[i] * (1.0 - prob[i]);
            let row = design.row(i);
            hess += row.transpose() * row * wi;
        }
        let step = hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or(EstimationError::LogisticNotConverged(it))?;
        let mut t = 1.0;
        let mut next = &beta + &step * t;
        let mut next_obj = penalized_loglik(&design, y, &next, ridge);
        while next_obj < obj - 1e-12 * obj.abs() && t > 1e-10 {
            t *= 0.5;
            next = &beta + &step * t;
            next_obj = penalized_loglik(&design, y, &next, ridge);
        }
        let decrement = grad.dot(&step);
        beta = next;
        obj = next_obj;
        if decrement.abs() < 1e-12 || (step.amax() * t) < 1e-10 * (1.0 + beta.amax()) {
            let probabilities = (&design * &beta).map(sigmoid).iter().copied().collect();
            return Ok(LogisticFit {
                coefficients: beta.iter().copied().collect(),
                probabilities,
                iterations: it,
            });
        }
    }
    Err(EstimationError::LogisticNotConverged(LOGISTIC_MAX_ITER))
}

/// Draws assignments repeatedly for one process and mode.
#[derive(Debug, Clone)]
pub struct TreatmentSampler {
    n_units: usize,
    n_treated: usize,
    mode: AssignmentMode,
    /// Selection weights for the logistic mode.
    weights: Option<Vec<f64>>,
}

impl TreatmentSampler {
    pub fn new(dgp: &FittedDGP, n_treated: usize, mode: &AssignmentMode) -> Result<Self> {
        let n = dgp.n_units();
        if n_treated == 0 || n_treated > n {
            return Err(EstimationError::Config(format!("cannot treat {n_treated} of {n} units")));
        }
        let weights = match mode {
            AssignmentMode::Uniform => None,
            AssignmentMode::Fixed { unit } => {
                if *unit >= n {
                    return Err(EstimationError::Config(format!("fixed unit {unit} is out of range")));
                }
                None
            }
            AssignmentMode::Logistic { labels } => {
                let fit = fit_logistic(&dgp.loadings.transpose(), labels, LOGISTIC_RIDGE)?;
                let positive = fit.probabilities.iter().filter(|&&p| p > 0.0).count();
                if positive < n_treated {
                    return Err(EstimationError::Config("too few units with positive treatment probability".into()));
                }
                Some(fit.probabilities)
            }
        };
        Ok(Self {
            n_units: n,
            n_treated,
            mode: mode.clone(),
            weights,
        })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Assignment {
        match (&self.mode, &self.weights) {
            (AssignmentMode::Fixed { unit }, _) => {
                let others: Vec<usize> = (0..self.n_units).filter(|u| u != unit).collect();
                let mut treated = vec![*unit];
                treated.extend(index::sample(rng, others.len(), self.n_treated - 1).iter().map(|k| others[k]));
                Assignment {
                    treated,
                    unit_of_interest: *unit,
                }
            }
            (_, weights) => {
                let treated: Vec<usize> = match weights {
                    None => index::sample(rng, self.n_units, self.n_treated).into_vec(),
                    Some(w) => index::sample_weighted(rng, self.n_units, |i| w[i], self.n_treated)
                        .expect("weights validated at construction")
                        .into_vec(),
                };
                let unit_of_interest = treated[rng.random_range(0..treated.len())];
                Assignment {
                    treated,
                    unit_of_interest,
                }
            }
        }
    }
}

/// One assignment drawn with a fresh generator seeded by `seed`.
pub fn assign_treatment(dgp: &FittedDGP, n_treated: usize, mode: &AssignmentMode, seed: u64) -> Result<Assignment> {
    let sampler = TreatmentSampler::new(dgp, n_treated, mode)?;
    Ok(sampler.draw(&mut ChaCha8Rng::seed_from_u64(seed)))
}

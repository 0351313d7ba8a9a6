//! Autoregressive models for simulated factors: AR(p) on the level (d = 0)
//! or the first difference (d = 1), fitted by conditional least squares.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::linalg::pinv_solve;

pub const MAX_AR_ORDER: usize = 5;
/// Periods discarded before the simulated path starts.
pub const BURN_IN: usize = 200;

/// `z_t = c + Σₖ φₖ z_{t−k} + e_t`, `e_t ~ N(0, σ²)`, where `z` is the series
/// (d = 0) or its first difference (d = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub p: usize,
    pub d: usize,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub innovation_variance: f64,
    /// Level the simulated path is attached to when d = 1.
    pub anchor: f64,
    /// Set for fitted models.
    pub aic: Option<f64>,
}

impl ArModel {
    pub fn white_noise(mean: f64, variance: f64) -> Self {
        Self {
            p: 0,
            d: 0,
            intercept: mean,
            coefficients: Vec::new(),
            innovation_variance: variance,
            anchor: 0.0,
            aic: None,
        }
    }

    pub fn ar(intercept: f64, coefficients: Vec<f64>, variance: f64) -> Self {
        Self {
            p: coefficients.len(),
            coefficients,
            intercept,
            innovation_variance: variance,
            d: 0,
            anchor: 0.0,
            aic: None,
        }
    }

    pub fn random_walk(anchor: f64, variance: f64) -> Self {
        Self {
            p: 0,
            d: 1,
            intercept: 0.0,
            coefficients: Vec::new(),
            innovation_variance: variance,
            anchor,
            aic: None,
        }
    }

    pub fn is_stationary(&self) -> bool {
        is_stationary(&self.coefficients)
    }

    /// Mean of `z` (the differenced series when d = 1).
    pub fn z_mean(&self) -> f64 {
        let s: f64 = self.coefficients.iter().sum();
        self.intercept / (1.0 - s)
    }

    fn next_z(&self, lags: impl Iterator<Item = f64>, shock: f64) -> f64 {
        self.intercept + self.coefficients.iter().zip(lags).map(|(a, z)| a * z).sum::<f64>() + shock
    }

    /// Forward path of `len` values started `BURN_IN` periods earlier at the mean.
    pub(crate) fn simulate_forward<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<f64> {
        let sd = self.innovation_variance.max(0.0).sqrt();
        let mean = if self.is_stationary() { self.z_mean() } else { 0.0 };
        let mut z = vec![mean; self.p];
        for _ in 0..BURN_IN + len {
            let e: f64 = rng.sample(StandardNormal);
            let next = self.next_z(z.iter().rev().copied(), sd * e);
            z.push(next);
        }
        let z = z.split_off(self.p + BURN_IN);
        match self.d {
            0 => z,
            _ => z
                .iter()
                .scan(self.anchor, |x, dz| {
                    *x += dz;
                    Some(*x)
                })
                .collect(),
        }
    }

    /// Extends a forward path backwards by `len` periods. For a stationary
    /// Gaussian AR the reversed process has the same law, so
    /// `z_t = c + Σₖ φₖ z_{t+k} + e_t`. Returns the values in calendar order.
    pub(crate) fn simulate_backward<R: Rng>(&self, future: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
        let sd = self.innovation_variance.max(0.0).sqrt();
        // z values following the backward segment, nearest first.
        let mut z: Vec<f64> = match self.d {
            0 => future.iter().take(self.p.max(1)).copied().collect(),
            _ => {
                let mut dz = vec![future[0] - self.anchor];
                dz.extend(future.windows(2).map(|w| w[1] - w[0]));
                dz.truncate(self.p.max(1));
                dz
            }
        };
        let mut back = Vec::with_capacity(len);
        for _ in 0..len {
            let e: f64 = rng.sample(StandardNormal);
            let next = self.next_z(z.iter().copied(), sd * e);
            back.push(next);
            z.insert(0, next);
            z.truncate(self.p.max(1));
        }
        let mut path = match self.d {
            0 => back,
            _ => {
                // x_{t−1} = x_t − Δx_t, walking away from the anchor.
                let mut x = self.anchor;
                let mut out = Vec::with_capacity(len);
                for &dz in &back {
                    out.push(x);
                    x -= dz;
                }
                out
            }
        };
        path.reverse();
        path
    }
}

/// All roots of `1 − Σ φₖ zᵏ` outside the unit circle, checked through the
/// companion matrix.
pub fn is_stationary(coefficients: &[f64]) -> bool {
    let p = coefficients.len();
    if p == 0 {
        return true;
    }
    let companion = DMatrix::from_fn(p, p, |i, j| {
        if i == 0 {
            coefficients[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion.complex_eigenvalues().iter().all(|l| l.norm() < 1.0 - 1e-10)
}

/// Largest order usable with the common conditioning set on a series of
/// length `t`.
fn max_order(t: usize) -> usize {
    (0..=MAX_AR_ORDER).rev().find(|&p| t >= 2 * p + 4).unwrap_or(0)
}

/// Conditional least squares on observations `start..T`, which must leave at
/// least `p + d` earlier values.
pub fn fit_ar_cls(y: &[f64], p: usize, d: usize, start: usize) -> Result<ArModel> {
    if d > 1 {
        return Err(EstimationError::Config("only d ∈ {0, 1} is supported".into()));
    }
    if start < p + d || start >= y.len() {
        return Err(EstimationError::Config(format!(
            "series of length {} too short for AR({p}) with d={d}",
            y.len()
        )));
    }
    let z: Vec<f64> = if d == 0 {
        y.to_vec()
    } else {
        std::iter::once(f64::NAN).chain(y.windows(2).map(|w| w[1] - w[0])).collect()
    };
    let n = y.len() - start;
    let x = DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { z[start + r - c] });
    let target = DVector::from_fn(n, |r, _| z[start + r]);
    let beta = pinv_solve(&x, &target);
    let resid = &target - &x * &beta;
    let sigma2 = resid.norm_squared() / n as f64;
    let k = (p + 2) as f64;
    let nf = n as f64;
    let aic = nf * (2.0 * std::f64::consts::PI * sigma2).ln() + nf + 2.0 * k;
    Ok(ArModel {
        p,
        d,
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        innovation_variance: sigma2,
        anchor: *y.last().expect("non-empty"),
        aic: Some(aic),
    })
}

/// AIC choice over `p ∈ 0..=5`, `d ∈ {0, 1}` on a common conditioning set,
/// keeping only stationary fits. Returns the model and whether the
/// random-walk fallback was used.
pub fn select_ar(y: &[f64]) -> Result<(ArModel, bool)> {
    if y.len() < 4 {
        return Err(EstimationError::Config("at least four observations are needed to fit a factor model".into()));
    }
    let pmax = max_order(y.len());
    let start = pmax + 1;
    let mut best: Option<ArModel> = None;
    for d in 0..=1 {
        for p in 0..=pmax {
            let m = fit_ar_cls(y, p, d, start)?;
            let aic = m.aic.unwrap_or(f64::NAN);
            if !m.is_stationary() || aic.is_nan() {
                continue;
            }
            if best.as_ref().is_none_or(|b| aic < b.aic.unwrap_or(f64::INFINITY)) {
                best = Some(m);
            }
        }
    }
    match best {
        Some(m) => Ok((m, false)),
        None => {
            warn!("no stationary AR fit; using a random walk");
            let dy: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
            let var = dy.iter().map(|v| v * v).sum::<f64>() / dy.len() as f64;
            Ok((ArModel::random_walk(*y.last().expect("non-empty"), var), true))
        }
    }
}

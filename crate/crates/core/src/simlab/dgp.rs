//! Linear factor data-generating processes: fitting to a panel and simulating
//! new panels with fixed loadings.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ar::{select_ar, ArModel};
use crate::error::{EstimationError, Result};
use crate::estimators::estimate_rank_svt;
use crate::linalg::svd_pca;
use crate::panel::PanelData;

/// Serializes a matrix as a list of rows.
mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Rows {
        nrows: usize,
        ncols: usize,
        rows: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Rows {
            nrows: m.nrows(),
            ncols: m.ncols(),
            rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Rows::deserialize(d)?;
        if r.rows.len() != r.nrows || r.rows.iter().any(|row| row.len() != r.ncols) {
            return Err(serde::de::Error::custom("matrix rows do not match the stated shape"));
        }
        Ok(DMatrix::from_fn(r.nrows, r.ncols, |i, j| r.rows[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedDGP {
    pub unit_ids: Vec<String>,
    /// μ, rank × units. Held fixed across simulations.
    #[serde(with = "matrix_rows")]
    pub loadings: DMatrix<f64>,
    pub factor_models: Vec<ArModel>,
    pub shock_variances: Vec<f64>,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FittedDGP {
    pub fn from_parts(
        unit_ids: Option<Vec<String>>,
        loadings: DMatrix<f64>,
        factor_models: Vec<ArModel>,
        shock_variances: Vec<f64>,
    ) -> Result<Self> {
        let n = loadings.ncols();
        let dgp = Self {
            unit_ids: unit_ids.unwrap_or_else(|| (0..n).map(|i| format!("u{i}")).collect()),
            rank: loadings.nrows(),
            loadings,
            factor_models,
            shock_variances,
            warnings: Vec::new(),
        };
        dgp.validate()?;
        Ok(dgp)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, n) = self.loadings.shape();
        let bad = |m: String| Err(EstimationError::Config(m));
        if n == 0 {
            return bad("a process needs at least one unit".into());
        }
        if self.rank != f || self.factor_models.len() != f {
            return bad(format!(
                "rank {} with {f} loading rows and {} factor models",
                self.rank,
                self.factor_models.len()
            ));
        }
        if self.unit_ids.len() != n || self.shock_variances.len() != n {
            return bad(format!(
                "{n} units but {} ids and {} shock variances",
                self.unit_ids.len(),
                self.shock_variances.len()
            ));
        }
        if self.shock_variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("shock variances must be finite and non-negative".into());
        }
        for (k, m) in self.factor_models.iter().enumerate() {
            if m.d > 1 || m.coefficients.len() != m.p || !m.is_stationary() || m.innovation_variance < 0.0 {
                return bad(format!("factor model {k} is not a stationary AR with d ∈ {{0, 1}}"));
            }
        }
        Ok(())
    }

    pub fn n_units(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn loading(&self, unit: usize) -> DVector<f64> {
        self.loadings.column(unit).into_owned()
    }
}

/// Fits factors by principal components (rank by singular value thresholding
/// unless given), an AR model to each factor, and per-unit shock variances.
pub fn fit_dgp(p: &PanelData, rank: Option<usize>) -> Result<FittedDGP> {
    if p.treated().iter().any(|&d| d) {
        return Err(EstimationError::Config("the panel used to fit a process must be untreated".into()));
    }
    let data = p.outcomes();
    let rank = rank.unwrap_or_else(|| estimate_rank_svt(data));
    let fit = svd_pca(data, rank)?;
    let mut warnings = Vec::new();
    let mut models = Vec::with_capacity(rank);
    for f in 0..rank {
        let col: Vec<f64> = fit.factors.column(f).iter().copied().collect();
        let (m, fallback) = select_ar(&col)?;
        if fallback {
            let msg = format!("factor {f}: no stationary AR fit, random walk used");
            warn!("{msg}");
            warnings.push(msg);
        }
        models.push(m);
    }
    Ok(FittedDGP {
        unit_ids: p.unit_ids().to_vec(),
        loadings: fit.loadings,
        factor_models: models,
        shock_variances: fit.residual_variances.iter().copied().collect(),
        rank,
        warnings,
    })
}

/// Loadings drawn around `n_clusters` centres: unit `i` gets centre
/// `i mod n_clusters` plus `spread`-scaled normal noise. Centres are standard
/// normal.
pub fn clustered_loadings<R: Rng>(rank: usize, n_units: usize, n_clusters: usize, spread: f64, rng: &mut R) -> DMatrix<f64> {
    let k = n_clusters.max(1);
    let centres = DMatrix::from_fn(rank, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    DMatrix::from_fn(rank, n_units, |f, i| {
        let jitter: f64 = if spread > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        centres[(f, i % k)] + spread * jitter
    })
}

/// True effects injected into the simulated unit of interest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub effects: Vec<f64>,
    /// Equally weighted average of `effects`.
    pub average: f64,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub panel: PanelData,
    pub truth: Truth,
}

const FACTOR_POST: u64 = 0;
const FACTOR_PRE: u64 = 1;
const SHOCK_POST: u64 = 2;
const SHOCK_PRE: u64 = 3;

fn stream(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 32) | index as u64);
    rng
}

/// Factor paths, `(t0 + t1) × rank`. Post periods run forward from a burn-in;
/// pre periods run backwards from the first post values, so the post segment
/// does not depend on `t0` and shorter pre segments are suffixes of longer
/// ones.
fn simulate_factors(dgp: &FittedDGP, t0: usize, t1: usize, seed: u64) -> DMatrix<f64> {
    let mut lam = DMatrix::zeros(t0 + t1, dgp.rank);
    for (f, m) in dgp.factor_models.iter().enumerate() {
        let mut post_rng = stream(seed, FACTOR_POST, f);
        let fwd = m.simulate_forward(t1.max(m.p).max(1), &mut post_rng);
        let mut pre_rng = stream(seed, FACTOR_PRE, f);
        let back = m.simulate_backward(&fwd, t0, &mut pre_rng);
        for (s, x) in back.iter().chain(fwd.iter().take(t1)).enumerate() {
            lam[(s, f)] = *x;
        }
    }
    lam
}

fn simulate(
    dgp: &FittedDGP,
    units: &[usize],
    treated: &[bool],
    effect_row: Option<usize>,
    t0: usize,
    t1: usize,
    effects: Option<&[f64]>,
    seed: u64,
) -> Result<Simulated> {
    if t0 == 0 || t1 == 0 {
        return Err(EstimationError::Config("simulated panels need at least one pre and one post period".into()));
    }
    if let Some(&u) = units.iter().find(|&&u| u >= dgp.n_units()) {
        return Err(EstimationError::Config(format!("unit {u} is not part of the process")));
    }
    let alpha: Vec<f64> = match effects {
        Some(e) if e.len() != t1 => {
            return Err(EstimationError::Config(format!("{} effects for {t1} post periods", e.len())));
        }
        Some(e) => e.to_vec(),
        None => vec![0.0; t1],
    };
    let t = t0 + t1;
    let lam = simulate_factors(dgp, t0, t1, seed);
    let mut y = DMatrix::zeros(units.len(), t);
    let mut d = DMatrix::from_element(units.len(), t, false);
    for (row, &u) in units.iter().enumerate() {
        let common = &lam * dgp.loadings.column(u);
        let sd = dgp.shock_variances[u].sqrt();
        let mut post = stream(seed, SHOCK_POST, u);
        let mut pre = stream(seed, SHOCK_PRE, u);
        for s in 0..t1 {
            let e: f64 = post.sample(StandardNormal);
            y[(row, t0 + s)] = common[t0 + s] + sd * e;
        }
        for k in 0..t0 {
            let e: f64 = pre.sample(StandardNormal);
            let s = t0 - 1 - k;
            y[(row, s)] = common[s] + sd * e;
        }
        if treated.get(row).copied().unwrap_or(false) {
            for s in t0..t {
                d[(row, s)] = true;
            }
        }
        if effect_row == Some(row) {
            for s in 0..t1 {
                y[(row, t0 + s)] += alpha[s];
            }
        }
    }
    let ids = units.iter().map(|&u| dgp.unit_ids[u].clone()).collect();
    let periods: Vec<i64> = (1..=t as i64).collect();
    let panel = PanelData::with_integer_periods(ids, &periods, y, Some(d))
        .map_err(|e| EstimationError::Config(format!("simulated panel rejected: {e}")))?;
    let average = alpha.iter().sum::<f64>() / t1 as f64;
    Ok(Simulated {
        panel,
        truth: Truth { effects: alpha, average },
    })
}

/// Simulates every unit of `dgp` in order; `treated_unit` is treated from
/// period `t0` on and receives `effects` (zero by default).
pub fn simulate_panel(
    dgp: &FittedDGP,
    t0: usize,
    t1: usize,
    treated_unit: usize,
    effects: Option<&[f64]>,
    seed: u64,
) -> Result<Simulated> {
    let units: Vec<usize> = (0..dgp.n_units()).collect();
    let treated: Vec<bool> = units.iter().map(|&u| u == treated_unit).collect();
    simulate(dgp, &units, &treated, Some(treated_unit), t0, t1, effects, seed)
}

/// Simulates the listed units, in that order. `units[0]` is the unit of
/// interest; rows with `treated[row]` are flagged as treated in the post
/// periods. Each unit's values equal those from [`simulate_panel`] with the
/// same seed.
pub fn simulate_units(
    dgp: &FittedDGP,
    units: &[usize],
    treated: &[bool],
    t0: usize,
    t1: usize,
    effects: Option<&[f64]>,
    seed: u64,
) -> Result<Simulated> {
    if units.is_empty() {
        return Err(EstimationError::Config("no units to simulate".into()));
    }
    simulate(dgp, units, treated, Some(0), t0, t1, effects, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(noise: f64) -> FittedDGP {
        let loadings = DMatrix::from_row_slice(2, 4, &[1.0, 0.5, 2.0, -1.0, 0.0, 1.0, 1.0, 0.3]);
        FittedDGP::from_parts(
            None,
            loadings,
            vec![ArModel::ar(1.0, vec![0.5], 1.0), ArModel::white_noise(0.0, 2.0)],
            vec![noise; 4],
        )
        .unwrap()
    }

    #[test]
    fn noiseless_panel_is_exact_factor_product() {
        let dgp = toy(0.0);
        let sim = simulate_panel(&dgp, 6, 4, 0, None, 3).unwrap();
        let lam = simulate_factors(&dgp, 6, 4, 3);
        let exact = (&lam * &dgp.loadings).transpose();
        assert_eq!(sim.panel.outcomes(), &exact);
        assert_eq!(sim.truth.average, 0.0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let dgp = toy(1.0);
        let a = simulate_panel(&dgp, 10, 5, 1, Some(&[1.0; 5]), 42).unwrap();
        let b = simulate_panel(&dgp, 10, 5, 1, Some(&[1.0; 5]), 42).unwrap();
        assert_eq!(a.panel, b.panel);
        let c = simulate_panel(&dgp, 10, 5, 1, Some(&[1.0; 5]), 43).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn post_segment_ignores_t0_and_pre_segments_nest() {
        let dgp = toy(1.0);
        let short = simulate_panel(&dgp, 5, 4, 0, None, 8).unwrap().panel;
        let long = simulate_panel(&dgp, 20, 4, 0, None, 8).unwrap().panel;
        for i in 0..4 {
            for s in 0..9 {
                assert_eq!(short.outcome(i, s), long.outcome(i, s + 15));
            }
        }
    }

    #[test]
    fn subset_matches_full_panel() {
        let dgp = toy(0.7);
        let full = simulate_panel(&dgp, 8, 3, 2, Some(&[0.5, 1.0, 1.5]), 5).unwrap();
        let sub = simulate_units(&dgp, &[2, 0], &[true, false], 8, 3, Some(&[0.5, 1.0, 1.5]), 5).unwrap();
        for s in 0..11 {
            assert_eq!(sub.panel.outcome(0, s), full.panel.outcome(2, s));
            assert_eq!(sub.panel.outcome(1, s), full.panel.outcome(0, s));
        }
        assert!(sub.panel.is_treated(0, 8) && !sub.panel.is_treated(0, 7));
    }

    #[test]
    fn injected_effects_on_post_periods_only() {
        let dgp = toy(0.0);
        let base = simulate_panel(&dgp, 4, 2, 3, None, 1).unwrap().panel;
        let hit = simulate_panel(&dgp, 4, 2, 3, Some(&[2.0, -1.0]), 1).unwrap();
        assert!((hit.panel.outcome(3, 4) - base.outcome(3, 4) - 2.0).abs() < 1e-12);
        assert!((hit.panel.outcome(3, 5) - base.outcome(3, 5) + 1.0).abs() < 1e-12);
        assert_eq!(hit.panel.outcome(3, 3), base.outcome(3, 3));
        assert_eq!(hit.truth.average, 0.5);
    }

    #[test]
    fn fit_recovers_rank_and_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loadings = DMatrix::from_fn(2, 40, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let truth = FittedDGP::from_parts(
            None,
            loadings,
            vec![ArModel::ar(0.0, vec![0.6], 1.0), ArModel::white_noise(0.0, 1.0)],
            vec![0.04; 40],
        )
        .unwrap();
        let sim = simulate_panel(&truth, 150, 50, 0, None, 7).unwrap();
        let untreated = PanelData::with_integer_periods(
            sim.panel.unit_ids().to_vec(),
            &(1..=200).collect::<Vec<_>>(),
            sim.panel.outcomes().clone(),
            None,
        )
        .unwrap();
        let fit = fit_dgp(&untreated, None).unwrap();
        assert_eq!(fit.rank, 2);
        let mean_var = fit.shock_variances.iter().sum::<f64>() / 40.0;
        assert!((mean_var - 0.04).abs() < 0.01, "{mean_var}");
        let json = serde_json::to_string(&fit).unwrap();
        let back: FittedDGP = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit);
        assert!(fit_dgp(&sim.panel, None).is_err());
    }

    #[test]
    fn clustered_loadings_repeat_centres() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = clustered_loadings(3, 25, 5, 0.0, &mut rng);
        assert_eq!(l.column(0), l.column(5));
        assert_eq!(l.column(4), l.column(24));
        assert_ne!(l.column(0), l.column(1));
    }
}

//! Block-subsampling confidence intervals for the weighted average effect.
//!
//! Each draw pairs re-estimated weights from one pre-period block with an
//! independent normal draw for the post-period noise:
//! `α* = −(1/√T₀)(Σₜ vₜ Y_Jt)'·√m·(Ŵ_b − Ŵ) + s*/√T₁`, `s* ~ N(0, Σ̂_v)`.
//! The interval is `[ᾱ̂ − α*_(⌈(1−δ/2)N⌉), ᾱ̂ − α*_(⌈(δ/2)N⌉)]`.

use log::warn;
use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EstimationError, Result};
use crate::estimators::{fit_gmm_weights, EstimationResult, GmmConfig, Method};
use crate::linalg::{hac_lrv_scalar, Bandwidth};
use crate::moments::{build_moment_system, moment_system_on};
use crate::panel::{PanelData, RoleAssignment};
use crate::selection::SelectionSpec;
use crate::stats::standard_normal_quantile;

pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubsampleScheme {
    /// Contiguous pre-period blocks.
    #[default]
    Block,
    /// `m` pre periods drawn with replacement, one subsample per draw.
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsamplingConfig {
    /// Subsample size; `None` means `⌊T₀^0.7⌋`.
    pub m: Option<usize>,
    pub n_draws: usize,
    /// δ of the `1 − δ` interval.
    pub level: f64,
    pub sigma_bandwidth: Bandwidth,
    pub reselect_per_block: bool,
    pub scheme: SubsampleScheme,
}

impl Default for SubsamplingConfig {
    fn default() -> Self {
        Self {
            m: None,
            n_draws: 1000,
            level: 0.10,
            sigma_bandwidth: Bandwidth::Auto,
            reselect_per_block: false,
            scheme: SubsampleScheme::Block,
        }
    }
}

/// `⌊T₀^0.7⌋`, kept within `[2, T₀]`.
pub fn default_block_length(t0: usize) -> usize {
    ((t0 as f64).powf(0.7).floor() as usize).max(2).min(t0)
}

impl SubsamplingConfig {
    pub fn block_length(&self, t0: usize) -> usize {
        self.m.unwrap_or_else(|| default_block_length(t0))
    }

    pub fn validate(&self, t0: usize) -> Result<()> {
        let m = self.block_length(t0);
        if m < 2 || m > t0 {
            return Err(EstimationError::Config(format!("subsample size m={m} must lie in [2, T0={t0}]")));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EstimationError::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.n_draws < MIN_DRAWS {
            return Err(EstimationError::Config(format!(
                "n_draws must be at least {MIN_DRAWS}, got {}",
                self.n_draws
            )));
        }
        if self.reselect_per_block && self.scheme == SubsampleScheme::Iid {
            return Err(EstimationError::Config("re-selection is only available with block subsampling".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaV {
    pub value: f64,
    pub bandwidth: usize,
    pub degenerate: bool,
}

/// Long-run variance of `√T₁·Σ vₜ(α̂ₜ − ᾱ̂)`, from the HAC estimate of the
/// series `√T₁·vₜ·(α̂ₜ − ᾱ̂)` multiplied by `T₁`.
pub fn estimate_sigma_v(
    effects: &DVector<f64>,
    weighted_average: f64,
    v: &DVector<f64>,
    bandwidth: Bandwidth,
) -> Result<SigmaV> {
    let t1 = effects.len();
    if t1 < 2 {
        return Err(EstimationError::Config("at least two post periods are needed to estimate the effect variance".into()));
    }
    if v.len() != t1 {
        return Err(EstimationError::EffectWeights(format!("{} weights for {t1} effects", v.len())));
    }
    let scale = (t1 as f64).sqrt();
    let x: Vec<f64> = (0..t1).map(|t| scale * v[t] * (effects[t] - weighted_average)).collect();
    let est = hac_lrv_scalar(&x, bandwidth)?;
    let degenerate = est.degenerate || x.iter().all(|&e| e == 0.0);
    Ok(SigmaV {
        value: if degenerate { 0.0 } else { t1 as f64 * est.matrix[(0, 0)].max(0.0) },
        bandwidth: est.bandwidth,
        degenerate,
    })
}

/// Re-estimated weights for one subsample, indexed by panel unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockWeights {
    /// 0-based offset of the block within the pre periods.
    pub start: usize,
    pub controls: Vec<usize>,
    pub weights: Option<Vec<f64>>,
    pub excluded: Option<String>,
}

impl BlockWeights {
    pub fn usable(&self) -> bool {
        self.weights.is_some()
    }
}

fn all_constant(p: &PanelData, units: &[usize], periods: &[usize]) -> bool {
    units.iter().all(|&i| {
        let first = p.outcome(i, periods[0]);
        periods.iter().all(|&t| p.outcome(i, t) == first)
    })
}

fn role_units(r: &RoleAssignment) -> Vec<usize> {
    let mut u = vec![r.unit_of_interest];
    u.extend(&r.controls);
    u.extend(&r.instruments);
    u
}

fn fit_block(
    p: &PanelData,
    r: &RoleAssignment,
    start: usize,
    m: usize,
    gmm: &GmmConfig,
    reselect: Option<&SelectionSpec>,
) -> BlockWeights {
    let periods = r.pre_periods[start..start + m].to_vec();
    let excluded = |controls: Vec<usize>, why: String| BlockWeights {
        start,
        controls,
        weights: None,
        excluded: Some(why),
    };
    if all_constant(p, &role_units(r), &periods) {
        return excluded(r.controls.clone(), "zero outcome variance".into());
    }
    let mut rb = r.with_pre_periods(periods);
    if let Some(spec) = reselect {
        match spec.run(p, &rb, gmm) {
            Ok(sel) => rb = sel.chosen.roles(&rb),
            Err(e) => return excluded(r.controls.clone(), format!("selection failed: {e}")),
        }
    }
    let fit = build_moment_system(p, &rb, &gmm.weighting).and_then(|ms| fit_gmm_weights(ms, gmm));
    match fit {
        Ok(f) => BlockWeights {
            start,
            controls: rb.controls,
            weights: Some(f.weights.values().to_vec()),
            excluded: None,
        },
        Err(e) => excluded(rb.controls, format!("estimation failed: {e}")),
    }
}

/// Weights re-estimated on each of the `T₀ − m + 1` contiguous pre-period
/// blocks, in block order. With `reselect` the partition is chosen afresh on
/// every block.
pub fn subsample_weights(
    p: &PanelData,
    r: &RoleAssignment,
    m: usize,
    gmm: &GmmConfig,
    reselect: Option<&SelectionSpec>,
) -> Result<Vec<BlockWeights>> {
    let t0 = r.t0();
    if m == 0 || m > t0 {
        return Err(EstimationError::Config(format!("block length m={m} must lie in [1, T0={t0}]")));
    }
    Ok((0..=t0 - m)
        .into_par_iter()
        .map(|b| fit_block(p, r, b, m, gmm, reselect))
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub point: f64,
    pub sigma_v_hat: f64,
    pub sigma_v_degenerate: bool,
    /// Sorted α* statistics.
    pub draws: Vec<f64>,
    pub level: f64,
    pub m: usize,
    pub scheme: SubsampleScheme,
    pub usable_blocks: usize,
    pub excluded_blocks: Vec<usize>,
    pub seed: u64,
}

/// 1-based order statistic `⌈q·N⌉` clamped to `[1, N]`.
pub fn order_statistic_index(q: f64, n: usize) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n)
}

/// Interval from sorted draws.
pub fn interval_from_draws(point: f64, sorted: &[f64], level: f64) -> (f64, f64) {
    let n = sorted.len();
    let lo = sorted[order_statistic_index(level / 2.0, n) - 1];
    let hi = sorted[order_statistic_index(1.0 - level / 2.0, n) - 1];
    (point - hi, point - lo)
}

/// Uniform on the open interval (0, 1) from 53 random bits.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    rng
}

/// `−(1/√T₀)·√m·Σⱼ (Σₜ vₜ Y_jt)(W_b,j − Ŵⱼ)`.
fn weight_term(vy: &DVector<f64>, w_full: &DVector<f64>, controls: &[usize], wb: &[f64], t0: usize, m: usize) -> f64 {
    let mut diff = -vy.dot(w_full);
    for (k, &j) in controls.iter().enumerate() {
        diff += vy[j] * wb[k];
    }
    -(m as f64).sqrt() / (t0 as f64).sqrt() * diff
}

/// Subsampling interval for `est.weighted_average`. `est` must come from the
/// simplex-constrained GMM estimator on `r`; `gmm` is the configuration that
/// produced it.
pub fn subsampling_ci(
    p: &PanelData,
    r: &RoleAssignment,
    est: &EstimationResult,
    gmm: &GmmConfig,
    cfg: &SubsamplingConfig,
    reselect: Option<&SelectionSpec>,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let weights = match (&est.method, &est.weights) {
        (Method::Gmm, Some(w)) if w.on_simplex() => w,
        _ => return Err(EstimationError::OffSimplexWeights),
    };
    let t0 = r.t0();
    cfg.validate(t0)?;
    if cfg.reselect_per_block && reselect.is_none() {
        return Err(EstimationError::Config("re-selection requested without a selection setup".into()));
    }
    let m = cfg.block_length(t0);
    let sigma = estimate_sigma_v(&est.effects, est.weighted_average, &est.v, cfg.sigma_bandwidth)?;
    let sd = sigma.value.sqrt();
    let t1 = r.t1() as f64;

    let n = p.n_units();
    let vy = DVector::from_fn(n, |j, _| r.post_periods.iter().zip(est.v.iter()).map(|(&t, vt)| vt * p.outcome(j, t)).sum::<f64>());
    let mut w_full = DVector::zeros(n);
    for (k, &j) in est.controls.iter().enumerate() {
        w_full[j] = weights.values()[k];
    }

    let noise = |rng: &mut ChaCha8Rng| sd * standard_normal_quantile(open_unit(rng)) / t1.sqrt();
    let (draws, usable_blocks, excluded_blocks) = match cfg.scheme {
        SubsampleScheme::Block => {
            let blocks = subsample_weights(p, r, m, gmm, reselect.filter(|_| cfg.reselect_per_block))?;
            let excluded: Vec<usize> = blocks.iter().filter(|b| !b.usable()).map(|b| b.start).collect();
            for b in blocks.iter().filter(|b| !b.usable()) {
                warn!("block {} excluded: {}", b.start, b.excluded.as_deref().unwrap_or(""));
            }
            let terms: Vec<f64> = blocks
                .iter()
                .filter_map(|b| b.weights.as_ref().map(|w| weight_term(&vy, &w_full, &b.controls, w, t0, m)))
                .collect();
            if terms.len() < 2 {
                return Err(EstimationError::TooFewBlocks { usable: terms.len() });
            }
            let draws: Vec<f64> = (0..cfg.n_draws)
                .into_par_iter()
                .map(|k| {
                    let mut rng = draw_rng(seed, k);
                    let b = rng.random_range(0..terms.len());
                    terms[b] + noise(&mut rng)
                })
                .collect();
            (draws, terms.len(), excluded)
        }
        SubsampleScheme::Iid => {
            let draws = (0..cfg.n_draws)
                .into_par_iter()
                .map(|k| {
                    let mut rng = draw_rng(seed, k);
                    iid_term(p, r, m, gmm, &mut rng, &vy, &w_full).map(|term| term + noise(&mut rng))
                })
                .collect::<Result<Vec<f64>>>()?;
            (draws, 0, Vec::new())
        }
    };
    let mut draws = draws;
    draws.sort_by(f64::total_cmp);
    let (lower, upper) = interval_from_draws(est.weighted_average, &draws, cfg.level);
    Ok(ConfidenceInterval {
        lower,
        upper,
        point: est.weighted_average,
        sigma_v_hat: sigma.value,
        sigma_v_degenerate: sigma.degenerate,
        draws,
        level: cfg.level,
        m,
        scheme: cfg.scheme,
        usable_blocks,
        excluded_blocks,
        seed,
    })
}

const IID_ATTEMPTS: usize = 100;

fn iid_term(
    p: &PanelData,
    r: &RoleAssignment,
    m: usize,
    gmm: &GmmConfig,
    rng: &mut ChaCha8Rng,
    vy: &DVector<f64>,
    w_full: &DVector<f64>,
) -> Result<f64> {
    let units = role_units(r);
    let mut last_err = None;
    for _ in 0..IID_ATTEMPTS {
        let periods: Vec<usize> = (0..m).map(|_| r.pre_periods[rng.random_range(0..r.t0())]).collect();
        if all_constant(p, &units, &periods) {
            continue;
        }
        match moment_system_on(p, r, &periods, &gmm.weighting).and_then(|ms| fit_gmm_weights(ms, gmm)) {
            Ok(f) => return Ok(weight_term(vy, w_full, &r.controls, f.weights.values(), r.t0(), m)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(EstimationError::TooFewBlocks { usable: 0 }))
}

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{assemble, check_roles, effects_and_average, resolve_effect_weights, Diagnostics, EstimationResult, Method};
use crate::error::Result;
use crate::linalg::{min_norm_quadratic, solve_simplex_qp, QpOptions};
use crate::moments::{as_simplex_qp, build_moment_system, gmm_objective, reweight_two_step, MomentSystem, WeightingScheme};
use crate::panel::{PanelData, RoleAssignment};
use crate::weights::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub weighting: WeightingScheme,
    /// Simplex-constrained (default) or minimum-norm unconstrained weights.
    pub constrained: bool,
    pub solver: QpOptions,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            weighting: WeightingScheme::Identity,
            constrained: true,
            solver: QpOptions::default(),
        }
    }
}

/// Weights for one moment system.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub weights: WeightVector,
    pub objective: f64,
    /// The system at the final step (second-step weighting for two-step).
    pub system: MomentSystem,
    pub diagnostics: Diagnostics,
}

fn solve_once(ms: &MomentSystem, cfg: &GmmConfig, diag: &mut Diagnostics) -> Result<WeightVector> {
    let q = as_simplex_qp(ms)?;
    if cfg.constrained {
        let sol = solve_simplex_qp(&q, cfg.solver.tol, cfg.solver.max_iter)?;
        diag.qp_iterations += sol.iterations;
        diag.kkt_residual = Some(sol.kkt_residual);
        diag.unique = Some(sol.unique);
        Ok(sol.weights)
    } else {
        Ok(WeightVector::unconstrained(&min_norm_quadratic(&q)))
    }
}

/// Solves for GMM weights on an already built moment system. Two-step
/// weighting reweights once from the identity-weighted first step.
pub fn fit_gmm_weights(ms: MomentSystem, cfg: &GmmConfig) -> Result<GmmFit> {
    let mut diag = Diagnostics {
        constrained: cfg.constrained,
        ..Default::default()
    };
    let (weights, system) = match cfg.weighting {
        WeightingScheme::TwoStep { bandwidth } => {
            diag.weighting = Some("two_step".into());
            let first = solve_once(&ms, cfg, &mut diag)?;
            let (second, info) = reweight_two_step(&ms, &first.to_dvector(), bandwidth)?;
            if info.fell_back_to_identity {
                diag.warnings.push("zero long-run variance; identity weighting kept".into());
            }
            diag.reweight = Some(info);
            (solve_once(&second, cfg, &mut diag)?, second)
        }
        WeightingScheme::Identity => {
            diag.weighting = Some("identity".into());
            (solve_once(&ms, cfg, &mut diag)?, ms)
        }
        WeightingScheme::Custom(_) => {
            diag.weighting = Some("custom".into());
            (solve_once(&ms, cfg, &mut diag)?, ms)
        }
    };
    let objective = gmm_objective(&system, &weights.to_dvector());
    Ok(GmmFit {
        weights,
        objective,
        system,
        diagnostics: diag,
    })
}

/// GMM synthetic control estimator.
pub fn gmm_sce(
    p: &PanelData,
    r: &RoleAssignment,
    cfg: &GmmConfig,
    v: Option<&DVector<f64>>,
) -> Result<EstimationResult> {
    check_roles(p, r)?;
    let v = resolve_effect_weights(v, r.t1())?;
    let ms = build_moment_system(p, r, &cfg.weighting)?;
    let t0 = ms.t0() as f64;
    let fit = fit_gmm_weights(ms, cfg)?;
    let fx = effects_and_average(&fit.weights.to_dvector(), p, r, &v);
    Ok(assemble(
        Method::Gmm,
        r,
        Some(fit.weights),
        fx,
        v,
        fit.objective,
        Some(t0 * fit.objective),
        fit.diagnostics,
    ))
}

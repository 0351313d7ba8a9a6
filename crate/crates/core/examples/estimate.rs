//! Weights, effects and gap series from each estimator on one simulated panel.
//!
//! Unit 0 is treated from period 41 on with a true effect of 2. Its loading is
//! a convex mix of units 1-3, so a good synthetic control exists. Units 1-4
//! are controls; 5-8 are instruments, and 7 and 8 are themselves treated.

use gmm_sce::estimators::{factor_estimator, gmm_sce, ols_sce, powell_estimator, uniform_sce, GmmConfig, PowellConfig};
use gmm_sce::linalg::QpOptions;
use gmm_sce::panel::RoleAssignment;
use gmm_sce::simlab::{simulate_units, ArModel, FittedDGP};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    #[rustfmt::skip]
    let mut mu = DMatrix::from_row_slice(2, 9, &[
        0.0, 1.0, 0.2, 1.5, -0.5, 2.0, 0.8, 1.1, 0.4,
        0.0, 0.3, 1.2, 0.9,  1.0, -0.4, 0.1, 0.7, 1.3,
    ]);
    let mix = 0.5 * mu.column(1) + 0.3 * mu.column(2) + 0.2 * mu.column(3);
    mu.set_column(0, &mix);
    let dgp = FittedDGP::from_parts(
        None,
        mu,
        vec![ArModel::ar(1.0, vec![0.6], 1.0), ArModel::ar(0.5, vec![0.3], 1.0)],
        vec![0.1; 9],
    )?;

    let units: Vec<usize> = (0..9).collect();
    let treated: Vec<bool> = units.iter().map(|&u| u == 0 || u >= 7).collect();
    let sim = simulate_units(&dgp, &units, &treated, 40, 20, Some(&[2.0; 20]), 11)?;
    let p = &sim.panel;
    let r = RoleAssignment::split_at(0, vec![1, 2, 3, 4], vec![5, 6, 7, 8], 40, p.n_periods());

    let gmm = gmm_sce(p, &r, &GmmConfig::default(), None)?;
    let ols = ols_sce(p, &r, None, &QpOptions::default())?;
    let uni = uniform_sce(p, &r, None)?;
    let (fac, fit) = factor_estimator(p, &r, None, None)?;
    let pow = powell_estimator(p, &r, None, &PowellConfig::default())?;

    println!("true average effect {:.3}", sim.truth.average);
    for est in [&gmm, &ols, &uni, &fac, &pow] {
        println!("{:>8}  avg effect {:+.3}", est.method.name(), est.weighted_average);
    }
    println!("factor rank {}", fit.rank);

    println!("\nGMM weights");
    for (&j, w) in gmm.controls.iter().zip(gmm.weights.as_ref().unwrap().values()) {
        println!("  {:>3} {w:.4}", p.unit_ids()[j]);
    }
    println!("SH statistic {:.3}", gmm.sh_statistic.unwrap());

    println!("\nperiod  actual  synthetic  gap");
    for row in gmm.gap_rows(p).iter().step_by(5) {
        println!("{:>6} {:>7.3} {:>10.3} {:>+6.3}", row.period, row.actual, row.synthetic, row.gap);
    }
    Ok(())
}

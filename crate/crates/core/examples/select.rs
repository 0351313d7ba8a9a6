//! Choosing which never-treated units act as controls and which only as
//! instruments, by downward testing and by the two-step rule.
//!
//! The treated unit mixes units 1 and 2. Units 3-6 load on a third factor the
//! treated unit does not have. Units 7 and 8 are treated as well, so they can
//! only ever be instruments.

use gmm_sce::estimators::GmmConfig;
use gmm_sce::panel::RoleAssignment;
use gmm_sce::selection::{mse_ordering, sequential_select, two_step_select};
use gmm_sce::simlab::{simulate_units, ArModel, FittedDGP};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    #[rustfmt::skip]
    let mu = DMatrix::from_row_slice(3, 9, &[
        0.6, 1.0, 0.0, 0.5, 1.2, 0.3, 0.9, 0.8, 0.2,
        0.4, 0.0, 1.0, 0.8, 0.2, 1.1, 0.6, 0.3, 0.9,
        0.0, 0.0, 0.0, 1.0, 1.5, 0.7, 1.2, 0.4, 0.6,
    ]);
    let models = vec![
        ArModel::ar(1.0, vec![0.5], 1.0),
        ArModel::ar(-0.5, vec![0.3], 1.0),
        ArModel::white_noise(2.0, 1.0),
    ];
    let dgp = FittedDGP::from_parts(None, mu, models, vec![0.05; 9])?;
    let units: Vec<usize> = (0..9).collect();
    let treated: Vec<bool> = units.iter().map(|&u| u == 0 || u >= 7).collect();
    let sim = simulate_units(&dgp, &units, &treated, 400, 20, None, 5)?;
    let p = &sim.panel;
    let base = RoleAssignment::split_at(0, vec![], vec![], 400, p.n_periods());
    let pool: Vec<usize> = (1..7).collect();
    let cfg = GmmConfig::default();

    let order = mse_ordering(p, &base, &pool);
    let names = |us: &[usize]| us.iter().map(|&u| p.unit_ids()[u].as_str()).collect::<Vec<_>>().join(" ");
    println!("ordering by pre-period fit: {}", names(&order));

    let seq = sequential_select(p, &base, &pool, &[7, 8], 0.05, &cfg)?;
    println!("\nsequential (alpha 0.05)");
    println!("{:<20} {:>4} {:>10} {:>10}", "controls", "df", "SH", "chi2");
    for c in &seq.trace {
        println!(
            "{:<20} {:>4} {:>10.3} {:>10.3}",
            names(&c.controls),
            c.df.unwrap_or(0),
            c.sh_statistic.unwrap_or(f64::NAN),
            c.critical_value.unwrap_or(f64::NAN)
        );
    }
    println!("chosen controls: {}   instruments: {}", names(&seq.chosen.controls), names(&seq.chosen.instruments));

    let two = two_step_select(p, &base, &pool, &[7, 8], &cfg)?;
    println!("\ntwo-step");
    println!("chosen controls: {}   instruments: {}", names(&two.chosen.controls), names(&two.chosen.instruments));
    Ok(())
}

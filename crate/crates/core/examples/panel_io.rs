//! Reading panels in long and wide layouts, checking roles, and the
//! fingerprint used in output provenance.

use std::fs;

use gmm_sce::panel::{load_panel, load_wide_panel, validate_roles, PanelFormat, RoleAssignment};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("gmm_sce_panel_io_{}", std::process::id()));
    fs::create_dir_all(&dir)?;

    let long = dir.join("long.csv");
    fs::write(
        &long,
        "unit,period,outcome,treated\n\
         A,2001,1.0,0\nA,2002,1.5,0\nA,2003,3.0,1\n\
         B,2001,0.8,0\nB,2002,1.2,0\nB,2003,1.4,0\n\
         C,2001,1.3,0\nC,2002,1.9,0\nC,2003,2.1,0\n",
    )?;
    let wide = dir.join("wide.csv");
    fs::write(&wide, "unit,2001,2002,2003\nA,1.0,1.5,3.0\nB,0.8,1.2,1.4\nC,1.3,1.9,2.1\n")?;
    let sidecar = dir.join("treatment.csv");
    fs::write(&sidecar, "unit,first_treated_period\nA,2003\n")?;

    let p = load_panel(&long, PanelFormat::LongCsv)?;
    let q = load_wide_panel(&wide, Some(&sidecar))?;
    println!("{} units x {} periods; layouts agree: {}", p.n_units(), p.n_periods(), p == q);
    println!("sha256 {}", p.content_hash());

    let a = p.unit_index("A").unwrap();
    let first = p.first_treated_period(a).unwrap();
    println!("A first treated in {}", p.period_labels()[first]);

    let good = RoleAssignment::split_at(a, vec![1], vec![2], first, p.n_periods());
    println!("valid roles: {:?}", validate_roles(&p, &good));
    let bad = RoleAssignment::split_at(a, vec![1, 2], vec![2], 3, p.n_periods());
    for v in validate_roles(&p, &bad) {
        println!("violation: {}", v.describe(&p));
    }

    let ragged = dir.join("ragged.csv");
    fs::write(&ragged, "unit,period,outcome\nA,1,1.0\nA,2,2.0\nB,1,0.5\n")?;
    if let Err(e) = load_panel(&ragged, PanelFormat::LongCsv) {
        println!("rejected: {e}");
    }
    fs::remove_dir_all(&dir)?;
    Ok(())
}

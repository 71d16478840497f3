//! Days crossed with periods: one factor is set per day, four per
//! day-period. The day design is fixed before the second stage runs.

use multistratum::config::ProblemConfig;
use multistratum::evaluate::skeleton_anova;
use multistratum::search::construct_multistratum;

fn main() -> multistratum::Result<()> {
    let c = ProblemConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/split_row_column.toml").as_ref())?;
    let mut cfg = c.search_config();
    cfg.n_starts = 20;
    let r = construct_multistratum(&c.problem()?, &c.plan(None)?, &cfg)?;
    for rep in &r.reports {
        println!("{:<14} m {:>3}  p {:>3}  criterion {:.4}  PE {}", rep.stratum, rep.m, rep.p, rep.value, rep.pure_error_df);
    }
    print!("{}", skeleton_anova(&r.design, &c.structure()?, &c.treatment_sets()?)?);
    Ok(())
}

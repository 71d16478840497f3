//! Twenty batches crossed with five occasions, five runs per cell, and a
//! 262-term run-level model. Terms in batch and occasion factors alone fall
//! into the blocks, so the run stage optimizes 193 of them. One start takes
//! a few seconds.

use multistratum::config::ProblemConfig;
use multistratum::search::construct_multistratum;

fn main() -> multistratum::Result<()> {
    let c = ProblemConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/split_plot_large.toml").as_ref())?;
    let mut cfg = c.search_config();
    if let Some(n) = std::env::args().nth(1) {
        cfg.n_starts = n.parse().expect("number of starts");
    }
    let r = construct_multistratum(&c.problem()?, &c.plan(None)?, &cfg)?;
    for rep in &r.reports {
        println!(
            "{:<24} m {:>3}  p {:>3}  criterion {:>9.4}  PE {:>3}  LoF {:>3}",
            rep.stratum, rep.m, rep.p, rep.value, rep.pure_error_df, rep.lack_of_fit_df
        );
    }
    Ok(())
}

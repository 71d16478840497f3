//! Ovens crossed with batches, two runs per cell. After the run-level
//! exchange, whole oven-batch cells are swapped between batches to improve
//! the batch-level information.

use multistratum::config::ProblemConfig;
use multistratum::search::construct_multistratum;

fn main() -> multistratum::Result<()> {
    let c = ProblemConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/strip_split_plot.toml").as_ref())?;
    let mut cfg = c.search_config();
    cfg.n_starts = 20;
    let r = construct_multistratum(&c.problem()?, &c.plan(None)?, &cfg)?;
    for rep in &r.reports {
        print!("{:<20} criterion {:.4}  PE {:>2}", rep.stratum, rep.value, rep.pure_error_df);
        match rep.interchange {
            Some((a, b)) => println!("  interchange {a:.4} -> {b:.4} in {} passes", rep.trajectories.interchange.len() - 1),
            None => println!(),
        }
    }
    Ok(())
}

//! Seven days crossed with four times, three factors at the run level,
//! searched under the D, DP and compound criteria.

use multistratum::config::ProblemConfig;
use multistratum::search::construct_multistratum;

fn main() -> multistratum::Result<()> {
    let c = ProblemConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/row_column.toml").as_ref())?;
    let problem = c.problem()?;
    let mut cfg = c.search_config();
    cfg.n_starts = 50;
    for crit in ["d", "dp", "cp"] {
        let r = construct_multistratum(&problem, &c.plan(Some(crit))?, &cfg)?;
        let rep = &r.reports[0];
        println!(
            "{crit:>3}: criterion {:.4}  D {:.4}  A {:.4}  PE {}  LoF {}",
            rep.value, rep.d_value, rep.a_value, rep.pure_error_df, rep.lack_of_fit_df
        );
    }
    Ok(())
}

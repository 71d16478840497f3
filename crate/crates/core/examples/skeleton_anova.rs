//! Skeleton ANOVA of a design file, split into model, lack of fit and pure
//! error in every stratum.
//!
//!     cargo run --example skeleton_anova -- configs/strip_split_plot.toml ../../fixtures/ex3_cp.csv

use std::path::PathBuf;

use multistratum::config::ProblemConfig;
use multistratum::design_io::read_design;
use multistratum::evaluate::skeleton_anova;

fn main() -> multistratum::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let mut args = std::env::args().skip(1);
    let cfg = args.next().map_or_else(|| root.join("configs/row_column.toml"), PathBuf::from);
    let design = args.next().map_or_else(|| root.join("../../fixtures/ex1_cp.csv"), PathBuf::from);
    let c = ProblemConfig::load(&cfg)?;
    let s = c.structure()?;
    let d = read_design(&design, &s)?;
    print!("{}", skeleton_anova(&d, &s, &c.treatment_sets()?)?);
    Ok(())
}

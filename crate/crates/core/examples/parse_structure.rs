//! Strata and degrees of freedom for a unit formula.
//!
//!     cargo run --example parse_structure -- "(Ovens(10)*Batches(3))/Runs(2)"

use multistratum::structure::UnitStructure;

fn main() -> multistratum::Result<()> {
    let formula = std::env::args().nth(1).unwrap_or_else(|| "(Batches(20)*Occasions(5))/Runs(5)".into());
    let s = UnitStructure::parse(&formula)?;
    println!("{s}  n = {}", s.n());
    let traces = s.projector_df();
    for (t, tr) in s.strata().iter().zip(traces).skip(1) {
        println!("{:<24} units {:>4}  df {:>4}  trace {tr:>4}", t.label, t.units, t.df);
    }
    Ok(())
}

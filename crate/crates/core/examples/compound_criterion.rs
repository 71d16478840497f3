//! Compound criterion of one design under a range of weightings, showing
//! the split between D, A and pure-error terms.

use multistratum::config::{criterion_preset, ProblemConfig};
use multistratum::criteria::{compound_criterion, criterion_components, CriterionContext, CriterionWeights};
use multistratum::design_io::read_design;
use multistratum::model::{build_model_matrix, TermSpec, TreatmentIndicator};
use multistratum::search::derived_blocking;

fn main() -> multistratum::Result<()> {
    let c = ProblemConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/row_column.toml").as_ref())?;
    let s = c.structure()?;
    let spec = TermSpec::second_order(&["X1", "X2", "X3"]);
    for file in ["ex1_dstar", "ex1_ds", "ex1_dps", "ex1_cp"] {
        let d = read_design(format!("{}/../../fixtures/{file}.csv", env!("CARGO_MANIFEST_DIR")).as_ref(), &s)?;
        let x = build_model_matrix(&d, &spec)?;
        let ctx = CriterionContext::new(derived_blocking(&s, s.bottom())?, x, TreatmentIndicator::from_rows(&d), spec.clone())?;
        let parts = criterion_components(&ctx, &Default::default())?;
        print!("{file:<10} D {:.4}  A {:.4}  PE {:>2}  LoF {:>2} |", parts.d_value, parts.a_value, parts.d, parts.lack_of_fit);
        for w in ["d", "dp", "a", "lp", "cp"] {
            let v = compound_criterion(&ctx, &criterion_preset(w)?)?;
            print!("  {w} {:.4}", v.value);
        }
        let custom = CriterionWeights::new([0.5, 0.5, 0.0, 0.0, 0.0])?;
        println!("  half {:.4}", compound_criterion(&ctx, &custom)?.value);
    }
    Ok(())
}

//! D and A efficiencies of the bundled designs against a reference over a
//! grid of variance ratios.

use multistratum::config::ProblemConfig;
use multistratum::design_io::read_design;
use multistratum::evaluate::{efficiency_table, parse_eta_grid};
use multistratum::model::LevelTable;

fn main() -> multistratum::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "row_column".into());
    let c = ProblemConfig::load(format!("{}/configs/{name}.toml", env!("CARGO_MANIFEST_DIR")).as_ref())?;
    let s = c.structure()?;
    let reference = read_design(&c.resolve_path(c.evaluate.reference.as_ref().expect("reference design")), &s)?;
    let designs: Vec<LevelTable> =
        c.evaluate.designs.iter().map(|p| read_design(&c.resolve_path(p), &s)).collect::<Result<_, _>>()?;
    let grid = parse_eta_grid(c.evaluate.eta_grid.as_deref().unwrap_or(""), &s)?;
    let refs: Vec<&LevelTable> = designs.iter().collect();
    let table = efficiency_table(&refs, &reference, &c.evaluation_model()?, &s, &grid, &c.evaluation_weights()?)?;
    for row in table {
        let eta: Vec<String> = row.eta.iter().map(|v| v.to_string()).collect();
        let d: Vec<String> = row.d.iter().map(|e| format!("{:7.2}", e.percent)).collect();
        let a: Vec<String> = row.a.iter().map(|e| format!("{:7.2}", e.percent)).collect();
        println!("{:<12} D {}   A {}", eta.join(":"), d.join(" "), a.join(" "));
    }
    Ok(())
}

//! Multi-stratum constructions from the bundled configs.

use std::path::PathBuf;

use multistratum::config::ProblemConfig;
use multistratum::evaluate::skeleton_anova;
use multistratum::search::construct_multistratum;

fn config(name: &str) -> ProblemConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.toml"));
    ProblemConfig::load(&p).unwrap()
}

fn build(name: &str, starts: usize) -> (ProblemConfig, multistratum::search::ConstructionResult) {
    let c = config(name);
    let mut cfg = c.search_config();
    cfg.n_starts = starts;
    let r = construct_multistratum(&c.problem().unwrap(), &c.plan(None).unwrap(), &cfg).unwrap();
    (c, r)
}

#[test]
fn split_row_column_keeps_whole_plot_design() {
    let (c, r) = build("split_row_column", 4);
    let s = c.structure().unwrap();
    assert_eq!(r.design.nrows(), 52);
    // X1 is constant within each day.
    let x1 = r.design.column_index("X1").unwrap();
    for day in 0..26 {
        assert_eq!(r.design.row(2 * day)[x1], r.design.row(2 * day + 1)[x1]);
    }
    let a = skeleton_anova(&r.design, &s, &c.treatment_sets().unwrap()).unwrap();
    assert_eq!(a.df("Days.Periods", "T3:model"), 18);
    assert_eq!(a.df("Days", "T1:model"), 2);
    let last = r.reports.last().unwrap();
    assert_eq!(last.pure_error_df as i64, a.df("Days.Periods", "PE"));
}

#[test]
fn strip_split_plot_interchange_does_not_lose() {
    let (_, r) = build("strip_split_plot", 3);
    let rep = r.reports.last().unwrap();
    let (before, after) = rep.interchange.expect("interchange ran");
    assert!(after >= before);
    assert!(rep.trajectories.exchange.windows(2).all(|w| w[1] >= w[0]));
    assert!(rep.trajectories.interchange.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn row_column_stage_report_matches_criterion() {
    let (_, r) = build("row_column", 6);
    let rep = &r.reports[0];
    assert_eq!((rep.m, rep.p), (28, 10));
    assert!(rep.pure_error_df + rep.lack_of_fit_df <= 28 - 10 - (rep.p - 1));
    assert!(rep.value > 0.0);
}

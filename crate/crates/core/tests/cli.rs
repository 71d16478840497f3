use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multistratum"))
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture(name: &str) -> PathBuf {
    manifest().join("../../fixtures").join(name)
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (status.code().unwrap(), String::from_utf8(stdout).unwrap(), String::from_utf8(stderr).unwrap())
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn parse_prints_strata_and_df() {
    let (code, out, _) = run(bin().args(["evaluate", "parse", "(Ovens(10)*Batches(3))/Runs(2)"]));
    assert_eq!(code, 0);
    assert_eq!(out.lines().last().unwrap(), "9 2 18 30");
    assert!(out.contains("Ovens.Batches.Runs"));
}

#[test]
fn parse_warns_on_mixed_operators() {
    let (code, out, err) = run(bin().args(["evaluate", "parse", "A(2)/B(3)*C(2)"]));
    assert_eq!(code, 0);
    assert!(err.contains("warning"));
    assert_eq!(out.lines().last().unwrap(), "1 1 4 1 4");
}

#[test]
fn bad_formula_reports_position_and_exits_2() {
    let (code, _, err) = run(bin().args(["evaluate", "parse", "Days(7)*(Times(4)"]));
    assert_eq!(code, 2);
    assert!(err.contains("column 18"), "{err}");
}

#[test]
fn unknown_flag_exits_2() {
    let (code, _, _) = run(bin().args(["construct", "--bogus"]));
    assert_eq!(code, 2);
}

#[test]
fn short_design_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("ex1_cp.csv")).unwrap();
    let short: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    let d = write(dir.path(), "short.csv", &short);
    let (code, _, err) = run(bin()
        .args(["evaluate", "anova", "--config"])
        .arg(manifest().join("configs/row_column.toml"))
        .arg("--design")
        .arg(&d));
    assert_eq!(code, 4, "{err}");
}

#[test]
fn too_few_runs_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "tiny.toml",
        r#"
[structure]
formula = "U(4)"

[[factor]]
name = "A"
stratum = "U"
levels = [-1, 0, 1]

[[factor]]
name = "B"
stratum = "U"
levels = [-1, 0, 1]

[[stage]]
stratum = "U"
factors = ["A", "B"]
model = "second-order"
criterion = "d"

[search]
starts = 2
retry_cap = 20
"#,
    );
    let (code, _, err) = run(bin().args(["construct", "--config"]).arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(code, 3, "{err}");
}

#[test]
fn construct_then_anova_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = manifest().join("configs/strip_split_plot.toml");
    let (code, _, err) = run(bin()
        .args(["construct", "--config"])
        .arg(&cfg)
        .args(["--starts", "3", "--seed", "2", "--out"])
        .arg(dir.path()));
    assert_eq!(code, 0, "{err}");
    let anova = std::fs::read_to_string(dir.path().join("anova.csv")).unwrap();
    assert!(anova.ends_with("Total,Total,59\n"));
    let (code, out, err) = run(bin()
        .args(["evaluate", "anova", "--config"])
        .arg(&cfg)
        .arg("--design")
        .arg(dir.path().join("design.csv")));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Ovens.Batches.Runs"));
}

#[test]
fn compare_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = manifest().join("configs/row_column.toml");
    let (code, out, err) = run(bin()
        .args(["evaluate", "compare", "--config"])
        .arg(&cfg)
        .arg("--design")
        .arg(fixture("ex1_cp.csv"))
        .arg("--ref")
        .arg(fixture("ex1_dstar.csv"))
        .args(["--eta-grid", "1:1;100:100", "--jobs", "1", "--out"])
        .arg(dir.path()));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("91.83"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("efficiency.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "eta_Days,eta_Times,D_ex1_cp,A_ex1_cp");
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn jobs_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(bin()
        .env("MULTISTRATUM_JOBS", "2")
        .args(["construct", "--config"])
        .arg(manifest().join("configs/row_column.toml"))
        .args(["--starts", "4", "--out"])
        .arg(dir.path()));
    assert_eq!(code, 0, "{err}");
    let (code, _, _) = run(bin()
        .env("MULTISTRATUM_JOBS", "many")
        .args(["construct", "--config"])
        .arg(manifest().join("configs/row_column.toml"))
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(code, 2);
}

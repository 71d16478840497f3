//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or numerical failure, 2 invalid
//! configuration or arguments, 3 no feasible starting design, 4 design
//! file does not match the structure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ProblemConfig;
use crate::design_io::{format_number, read_design, write_design};
use crate::error::{Error, Result};
use crate::evaluate::{efficiency_table, parse_eta_grid, random_strata, skeleton_anova, SkeletonAnova};
use crate::model::LevelTable;
use crate::search::{construct_multistratum, ConstructionResult};
use crate::structure::UnitStructure;

pub const JOBS_ENV: &str = "MULTISTRATUM_JOBS";

#[derive(Debug, Parser)]
#[command(name = "multistratum", version, about = "Multi-stratum response surface designs with pure-error degrees of freedom")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a design stratum by stratum from a config file.
    Construct(ConstructArgs),
    /// Inspect existing designs.
    #[command(subcommand)]
    Evaluate(EvaluateCommand),
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for design.csv, criteria.csv and anova.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, env = JOBS_ENV)]
    pub jobs: Option<usize>,
    /// Use one criterion preset (d, dp, a, lp, cp) for every stage.
    #[arg(long)]
    pub criterion: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum EvaluateCommand {
    /// Skeleton analysis of variance of a design.
    Anova(AnovaArgs),
    /// D and A efficiencies relative to a reference design over a grid of
    /// variance ratios.
    Compare(CompareArgs),
    /// Strata and degrees of freedom of a unit-structure formula.
    Parse(ParseArgs),
}

#[derive(Debug, Args)]
pub struct AnovaArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub design: PathBuf,
    /// Also write anova.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Designs to compare; the config's list when omitted.
    #[arg(long)]
    pub design: Vec<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// `1,10,100`, `Days=1,10;Times=1` or `1:1;100:1`.
    #[arg(long)]
    pub eta_grid: Option<String>,
    /// Trace weights for A efficiency: identity or quadratic-quarter.
    #[arg(long)]
    pub a_weights: Option<String>,
    #[arg(long, env = JOBS_ENV)]
    pub jobs: Option<usize>,
    /// Also write efficiency.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    pub formula: Option<String>,
    #[arg(long, conflicts_with = "formula")]
    pub config: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::EmptyMatrix | Error::NonFinite | Error::AmbiguousRank { .. } => 1,
        Error::InfeasibleStart { .. } => 3,
        Error::Dimension(_) | Error::Design(_) => 4,
        _ => 2,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Construct(a) => construct(&a),
        Command::Evaluate(EvaluateCommand::Anova(a)) => anova(&a),
        Command::Evaluate(EvaluateCommand::Compare(a)) => compare(&a),
        Command::Evaluate(EvaluateCommand::Parse(a)) => parse(&a),
    }
}

fn load(path: &Path) -> Result<(ProblemConfig, UnitStructure)> {
    let c = ProblemConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        e => e,
    })?;
    let s = c.structure()?;
    if s.has_mixed_operators() {
        eprintln!(
            "warning: `{}` mixes `*` and `/` without parentheses; read left to right as {}",
            c.structure.formula, s
        );
    }
    Ok((c, s))
}

fn construct(a: &ConstructArgs) -> Result<String> {
    let (c, structure) = load(&a.config)?;
    let problem = c.problem()?;
    let plan = c.plan(a.criterion.as_deref())?;
    let mut cfg = c.search_config();
    if let Some(s) = a.starts {
        cfg.n_starts = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = (j > 0).then_some(j);
    }
    let result = construct_multistratum(&problem, &plan, &cfg)?;
    let table = skeleton_anova(&result.design, &structure, &c.treatment_sets()?)?;
    std::fs::create_dir_all(&a.out)?;
    write_design(&a.out.join("design.csv"), &structure, &result.design)?;
    std::fs::write(a.out.join("criteria.csv"), criteria_csv(&result))?;
    std::fs::write(a.out.join("anova.csv"), anova_csv(&table))?;
    let mut out = String::new();
    let _ = writeln!(out, "best of {} starts: start {}", cfg.n_starts, result.best_start);
    out.push_str(&criteria_text(&result));
    let _ = writeln!(out);
    let _ = write!(out, "{table}");
    let _ = writeln!(out, "\nwrote design.csv, criteria.csv, anova.csv to {}", a.out.display());
    Ok(out)
}

fn criteria_csv(r: &ConstructionResult) -> String {
    let mut s = String::from("stratum,m,p,criterion,d_value,a_value,pure_error_df,lack_of_fit_df,exchange_passes\n");
    for rep in &r.reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            rep.stratum,
            rep.m,
            rep.p,
            format_number(rep.value),
            format_number(rep.d_value),
            format_number(rep.a_value),
            rep.pure_error_df,
            rep.lack_of_fit_df,
            rep.trajectories.exchange.len().saturating_sub(1)
        );
    }
    s
}

fn criteria_text(r: &ConstructionResult) -> String {
    let mut s = format!("{:<24} {:>4} {:>4} {:>12} {:>12} {:>12} {:>4} {:>4}\n", "stratum", "m", "p", "criterion", "D", "A", "PE", "LoF");
    for rep in &r.reports {
        let _ = writeln!(
            s,
            "{:<24} {:>4} {:>4} {:>12.6} {:>12.6} {:>12.6} {:>4} {:>4}",
            rep.stratum, rep.m, rep.p, rep.value, rep.d_value, rep.a_value, rep.pure_error_df, rep.lack_of_fit_df
        );
        if let Some((before, after)) = rep.interchange {
            let _ = writeln!(s, "  interchange: {before:.6} -> {after:.6}");
        }
    }
    s
}

fn anova_csv(t: &SkeletonAnova) -> String {
    let mut s = String::from("stratum,source,df\n");
    for r in &t.rows {
        let _ = writeln!(s, "{},{},{}", r.stratum, r.source, r.df);
    }
    s
}

fn anova(a: &AnovaArgs) -> Result<String> {
    let (c, structure) = load(&a.config)?;
    let design = read_design(&a.design, &structure)?;
    let table = skeleton_anova(&design, &structure, &c.treatment_sets()?)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("anova.csv"), anova_csv(&table))?;
    }
    Ok(table.to_string())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn compare(a: &CompareArgs) -> Result<String> {
    let (c, structure) = load(&a.config)?;
    let reference = a
        .reference
        .clone()
        .or_else(|| c.evaluate.reference.as_ref().map(|p| c.resolve_path(p)))
        .ok_or_else(|| Error::Config("no reference design: pass --ref or set evaluate.reference".into()))?;
    let paths: Vec<PathBuf> = if a.design.is_empty() {
        c.evaluate.designs.iter().map(|p| c.resolve_path(p)).collect()
    } else {
        a.design.clone()
    };
    if paths.is_empty() {
        return Err(Error::Config("no designs to compare: pass --design or set evaluate.designs".into()));
    }
    let spec = c.evaluation_model()?;
    let w = match &a.a_weights {
        Some(n) => crate::config::parse_weight_matrix(n)?,
        None => c.evaluation_weights()?,
    };
    let grid_spec = a.eta_grid.clone().or_else(|| c.evaluate.eta_grid.clone()).unwrap_or_default();
    let grid = parse_eta_grid(&grid_spec, &structure)?;
    let ref_design = read_design(&reference, &structure)?;
    let designs: Vec<LevelTable> = paths.iter().map(|p| read_design(p, &structure)).collect::<Result<_>>()?;
    let refs: Vec<&LevelTable> = designs.iter().collect();
    let compute = || efficiency_table(&refs, &ref_design, &spec, &structure, &grid, &w);
    let rows = match a.jobs.filter(|&j| j > 0) {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(compute)?,
        None => compute()?,
    };

    let strata = random_strata(&structure);
    let names: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let mut text = format!("relative to {}\n", stem(&reference));
    let mut csv = String::new();
    let head_eta: Vec<String> = strata.iter().map(|s| format!("eta_{s}")).collect();
    let head_d: Vec<String> = names.iter().map(|n| format!("D_{n}")).collect();
    let head_a: Vec<String> = names.iter().map(|n| format!("A_{n}")).collect();
    let _ = writeln!(csv, "{}", [head_eta.clone(), head_d.clone(), head_a.clone()].concat().join(","));
    let _ = writeln!(
        text,
        "{:<16} {}   {}",
        strata.join(":"),
        head_d.iter().map(|h| format!("{h:>10}")).collect::<String>(),
        head_a.iter().map(|h| format!("{h:>10}")).collect::<String>()
    );
    for r in &rows {
        let eta: Vec<String> = r.eta.iter().map(|v| format_number(*v)).collect();
        let show = |e: &crate::evaluate::Efficiency| if e.singular { "singular".to_string() } else { format!("{:.2}", e.percent) };
        let _ = writeln!(
            text,
            "{:<16} {}   {}",
            eta.join(":"),
            r.d.iter().map(|e| format!("{:>10}", show(e))).collect::<String>(),
            r.a.iter().map(|e| format!("{:>10}", show(e))).collect::<String>()
        );
        let vals: Vec<String> = r.d.iter().chain(&r.a).map(|e| format_number(e.percent)).collect();
        let _ = writeln!(csv, "{}", [eta, vals].concat().join(","));
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("efficiency.csv"), csv)?;
    }
    Ok(text)
}

fn parse(a: &ParseArgs) -> Result<String> {
    let structure = match (&a.formula, &a.config) {
        (Some(f), _) => {
            let s = UnitStructure::parse(f)?;
            if s.has_mixed_operators() {
                eprintln!("warning: `{f}` mixes `*` and `/` without parentheses; read left to right as {s}");
            }
            s
        }
        (None, Some(p)) => load(p)?.1,
        (None, None) => return Err(Error::Config("give a formula or --config".into())),
    };
    let mut out = format!("{structure}  n = {}\n", structure.n());
    let _ = writeln!(out, "{:<28} {:>6} {:>6}", "stratum", "units", "df");
    for s in &structure.strata()[1..] {
        let _ = writeln!(out, "{:<28} {:>6} {:>6}", s.label, s.units, s.df);
    }
    let dfs: Vec<String> = structure.strata()[1..].iter().map(|s| s.df.to_string()).collect();
    let _ = writeln!(out, "{}", dfs.join(" "));
    Ok(out)
}

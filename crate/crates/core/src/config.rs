//! TOML problem descriptions.
//!
//! ```toml
//! [structure]
//! formula = "Days(7)*Times(4)"
//!
//! [[factor]]
//! name = "X1"
//! stratum = "Days.Times"
//! levels = [-1, 0, 1]
//!
//! [[stage]]
//! stratum = "Days.Times"
//! factors = ["X1"]
//! model = "second-order"
//! criterion = "dp"
//!
//! [search]
//! starts = 200
//! seed = 7
//!
//! [evaluate]
//! reference = "dstar.csv"
//! eta_grid = "1,10,100"
//! ```
//!
//! See the README for every key. Relative paths are resolved against the
//! directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::criteria::{CriterionWeights, WeightMatrix};
use crate::error::{Error, Result};
use crate::evaluate::TreatmentSet;
use crate::model::{Factor, Term, TermSpec};
use crate::search::{
    BlockingChoice, CandidateSet, ConstructionPlan, InterchangeSpec, PlanEntry, Problem, SearchConfig,
};
use crate::structure::UnitStructure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub structure: StructureDecl,
    #[serde(rename = "factor", default)]
    pub factors: Vec<FactorDecl>,
    #[serde(rename = "stage", default)]
    pub stages: Vec<StageDecl>,
    #[serde(default)]
    pub search: SearchDecl,
    #[serde(default)]
    pub evaluate: EvaluateDecl,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDecl {
    pub formula: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDecl {
    pub name: String,
    pub stratum: String,
    pub levels: Vec<f64>,
}

/// `"second-order"`, `"linear"`, `"linear+2fi"`, or a table
/// `{ kind = .., factors = [..], terms = [..], drop = [..], max_exponent = .. }`.
/// `kind = "custom"` uses `terms` alone; otherwise `terms` are added.
/// `cross` adds products: each entry is a list of term lists, and every
/// product taking one term from each list is added.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelDecl {
    Named(String),
    Table(ModelTable),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelTable {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub factors: Option<Vec<String>>,
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default)]
    pub cross: Vec<Vec<Vec<String>>>,
    #[serde(default)]
    pub drop: Vec<String>,
    pub max_exponent: Option<u32>,
}

fn default_kind() -> String {
    "second-order".into()
}

impl Default for ModelDecl {
    fn default() -> Self {
        Self::Named(default_kind())
    }
}

impl ModelDecl {
    /// `scope` is the factor list used when the declaration names none.
    pub fn build(&self, scope: &[String]) -> Result<TermSpec> {
        let table = match self {
            Self::Named(k) => ModelTable { kind: k.clone(), ..Default::default() },
            Self::Table(t) => t.clone(),
        };
        let names = table.factors.clone().unwrap_or_else(|| scope.to_vec());
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let parse = |ts: &[String]| ts.iter().map(|t| Term::parse(t)).collect::<Result<Vec<_>>>();
        let base = match table.kind.as_str() {
            "second-order" => TermSpec::second_order(&names),
            "linear" => TermSpec::linear(&names),
            "linear+2fi" => TermSpec::linear_with_interactions(&names),
            "custom" => TermSpec::custom(vec![]),
            k => return Err(Error::Config(format!("unknown model kind `{k}`"))),
        };
        let mut extra = parse(&table.terms)?;
        for product in &table.cross {
            let mut acc = vec![Term::new(Vec::<(String, u32)>::new())];
            for list in product {
                let terms = parse(list)?;
                acc = acc.iter().flat_map(|a| terms.iter().map(move |t| a.product(t))).collect();
            }
            extra.extend(acc);
        }
        let mut spec = base.with(extra).without(&parse(&table.drop)?);
        if let Some(e) = table.max_exponent {
            spec = spec.with_max_exponent(e);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Diagonal trace weights: `"identity"`, `"quadratic-quarter"` or a list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum WeightDecl {
    Named(String),
    Values(Vec<f64>),
}

impl WeightDecl {
    pub fn build(&self) -> Result<WeightMatrix> {
        match self {
            Self::Named(n) => parse_weight_matrix(n),
            Self::Values(v) => Ok(WeightMatrix::Diagonal(v.clone())),
        }
    }
}

pub fn parse_weight_matrix(name: &str) -> Result<WeightMatrix> {
    match name {
        "identity" => Ok(WeightMatrix::Identity),
        "quadratic-quarter" => Ok(WeightMatrix::QuadraticQuarter),
        n => Err(Error::Config(format!("unknown weight matrix `{n}`"))),
    }
}

/// `"crd"`, `"derived"` or a list of stratum labels.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BlockingDecl {
    Named(String),
    Strata(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterchangeDecl {
    pub groups: String,
    pub cells: String,
    #[serde(default)]
    pub model: ModelDecl,
    pub criterion: Option<String>,
    pub kappa: Option<[f64; 5]>,
    #[serde(default = "default_interchange_passes")]
    pub max_passes: usize,
}

fn default_interchange_passes() -> usize {
    50
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageDecl {
    pub stratum: String,
    #[serde(default)]
    pub factors: Vec<String>,
    #[serde(default)]
    pub model: ModelDecl,
    pub criterion: Option<String>,
    pub kappa: Option<[f64; 5]>,
    pub alphas: Option<[f64; 2]>,
    pub a_weights: Option<WeightDecl>,
    /// Candidate points to drop; each table lists factor levels that must
    /// all match.
    #[serde(default)]
    pub exclude_points: Vec<BTreeMap<String, f64>>,
    pub blocking: Option<BlockingDecl>,
    pub interchange: Option<InterchangeDecl>,
    /// Label of this stage's treatment set in the ANOVA.
    pub label: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchDecl {
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_passes")]
    pub max_passes: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
    pub jobs: Option<usize>,
}

fn default_starts() -> usize {
    100
}
fn default_seed() -> u64 {
    1
}
fn default_passes() -> usize {
    50
}
fn default_rel_tol() -> f64 {
    1e-9
}
fn default_retry_cap() -> usize {
    1000
}

impl Default for SearchDecl {
    fn default() -> Self {
        Self {
            starts: default_starts(),
            seed: default_seed(),
            max_passes: default_passes(),
            rel_tol: default_rel_tol(),
            retry_cap: default_retry_cap(),
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentSetDecl {
    pub label: String,
    pub factors: Vec<String>,
    #[serde(default)]
    pub model: ModelDecl,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvaluateDecl {
    /// Model over all factors; the last stage's model when absent.
    pub model: Option<ModelDecl>,
    pub a_weights: Option<WeightDecl>,
    pub eta_grid: Option<String>,
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub designs: Vec<PathBuf>,
    #[serde(rename = "treatment_set", default)]
    pub treatment_sets: Vec<TreatmentSetDecl>,
}

fn weights_from(criterion: Option<&str>, kappa: Option<[f64; 5]>) -> Result<CriterionWeights> {
    match (criterion, kappa) {
        (Some(_), Some(_)) => Err(Error::Config("give either `criterion` or `kappa`, not both".into())),
        (None, Some(k)) => CriterionWeights::new(k).map_err(|e| Error::Config(e.to_string())),
        (c, None) => criterion_preset(c.unwrap_or("d")),
    }
}

/// `d`, `dp`, `a`, `lp` or `cp` (weights 0, 1/3, 1/3, 0, 1/3).
pub fn criterion_preset(name: &str) -> Result<CriterionWeights> {
    let k = match name.to_ascii_lowercase().as_str() {
        "d" => [1.0, 0.0, 0.0, 0.0, 0.0],
        "dp" => [0.0, 1.0, 0.0, 0.0, 0.0],
        "a" | "l" => [0.0, 0.0, 1.0, 0.0, 0.0],
        "lp" => [0.0, 0.0, 0.0, 1.0, 0.0],
        "cp" => [0.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0],
        other => return Err(Error::Config(format!("unknown criterion `{other}`"))),
    };
    CriterionWeights::new(k)
}

impl ProblemConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn structure(&self) -> Result<UnitStructure> {
        UnitStructure::parse(&self.structure.formula)
    }

    pub fn problem(&self) -> Result<Problem> {
        let structure = self.structure()?;
        let mut factors: Vec<Factor> = Vec::new();
        for f in &self.factors {
            if factors.iter().any(|g| g.name == f.name) {
                return Err(Error::Config(format!("factor `{}` declared twice", f.name)));
            }
            if f.levels.is_empty() || f.levels.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("factor `{}` needs finite levels", f.name)));
            }
            structure.stratum_index(&f.stratum)?;
            factors.push(Factor::new(&f.name, &f.stratum, &f.levels));
        }
        Ok(Problem { structure, factors })
    }

    /// Factors applied at every stage up to and including `k`.
    fn scope(&self, k: usize) -> Vec<String> {
        self.stages[..=k].iter().flat_map(|s| s.factors.iter().cloned()).collect()
    }

    /// The construction plan, with `criterion` replacing every stage's
    /// weights when given.
    pub fn plan(&self, criterion: Option<&str>) -> Result<ConstructionPlan> {
        if self.stages.is_empty() {
            return Err(Error::Config("no [[stage]] entries".into()));
        }
        let problem = self.problem()?;
        let mut entries = Vec::with_capacity(self.stages.len());
        for (k, st) in self.stages.iter().enumerate() {
            let scope = self.scope(k);
            let model = st.model.build(&scope)?;
            let mut weights = match criterion {
                Some(c) => criterion_preset(c)?,
                None => weights_from(st.criterion.as_deref(), st.kappa)?,
            };
            if let Some(w) = &st.a_weights {
                weights = weights.with_weight_matrix(w.build()?);
            }
            if let Some([a, b]) = st.alphas {
                weights = weights.with_alphas(a, b).map_err(|e| Error::Config(e.to_string()))?;
            }
            let blocking = match &st.blocking {
                None => BlockingChoice::Derived,
                Some(BlockingDecl::Named(n)) if n == "derived" => BlockingChoice::Derived,
                Some(BlockingDecl::Named(n)) if n == "crd" => BlockingChoice::Crd,
                Some(BlockingDecl::Named(n)) => return Err(Error::Config(format!("unknown blocking `{n}`"))),
                Some(BlockingDecl::Strata(s)) => BlockingChoice::Strata(s.clone()),
            };
            let names: Vec<&str> = st.factors.iter().map(String::as_str).collect();
            let mut entry = PlanEntry::new(&st.stratum, &names, model, weights.clone());
            entry.blocking = blocking;
            if !st.exclude_points.is_empty() {
                let fs = st.factors.iter().map(|f| problem.factor(f).cloned()).collect::<Result<Vec<_>>>()?;
                let mut c = CandidateSet::full_factorial(&fs)?;
                for ex in &st.exclude_points {
                    let levels: Vec<(String, f64)> = ex.iter().map(|(k, v)| (k.clone(), *v)).collect();
                    c = c.exclude(&levels)?;
                }
                entry = entry.with_candidates(c);
            }
            if let Some(ic) = &st.interchange {
                let iw = match (ic.criterion.as_deref(), ic.kappa) {
                    (None, None) => None,
                    (c, k) => Some(weights_from(c, k)?.with_weight_matrix(weights.w.clone())),
                };
                entry = entry.with_interchange(InterchangeSpec {
                    groups: ic.groups.clone(),
                    cells: ic.cells.clone(),
                    model: ic.model.build(&scope)?,
                    weights: iw,
                    max_passes: ic.max_passes,
                });
            }
            entries.push(entry);
        }
        Ok(ConstructionPlan { entries })
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            n_starts: self.search.starts,
            seed: self.search.seed,
            max_passes: self.search.max_passes,
            rel_tol: self.search.rel_tol,
            retry_cap: self.search.retry_cap,
            jobs: self.search.jobs,
        }
    }

    /// Treatment sets for the ANOVA. Unless listed explicitly, each stage
    /// contributes `T<k>` (k its stratum index) over the factors applied so
    /// far, with the stage model minus terms fitted by earlier sets.
    pub fn treatment_sets(&self) -> Result<Vec<TreatmentSet>> {
        if !self.evaluate.treatment_sets.is_empty() {
            let mut all: Vec<String> = Vec::new();
            return self
                .evaluate
                .treatment_sets
                .iter()
                .map(|t| {
                    for f in &t.factors {
                        if !all.contains(f) {
                            all.push(f.clone());
                        }
                    }
                    Ok(TreatmentSet { label: t.label.clone(), factors: all.clone(), model: t.model.build(&all)? })
                })
                .collect();
        }
        let structure = self.structure()?;
        let mut sets: Vec<TreatmentSet> = Vec::new();
        let mut fitted: Vec<Term> = Vec::new();
        for (k, st) in self.stages.iter().enumerate() {
            let scope = self.scope(k);
            let model = st.model.build(&scope)?.without(&fitted);
            fitted.extend(model.terms().iter().cloned());
            let label = match &st.label {
                Some(l) => l.clone(),
                None => format!("T{}", structure.stratum_index(&st.stratum)?),
            };
            sets.push(TreatmentSet { label, factors: scope, model });
        }
        Ok(sets)
    }

    /// Model used for efficiencies.
    pub fn evaluation_model(&self) -> Result<TermSpec> {
        let all: Vec<String> = self.factors.iter().map(|f| f.name.clone()).collect();
        match (&self.evaluate.model, self.stages.len()) {
            (Some(m), _) => m.build(&all),
            (None, 0) => ModelDecl::default().build(&all),
            (None, k) => self.stages[k - 1].model.build(&self.scope(k - 1)),
        }
    }

    pub fn evaluation_weights(&self) -> Result<WeightMatrix> {
        self.evaluate.a_weights.as_ref().map_or(Ok(WeightMatrix::Identity), WeightDecl::build)
    }
}

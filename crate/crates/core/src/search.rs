//! Stratum-by-stratum construction by point exchange.
//!
//! A [`ConstructionPlan`] lists, coarse to fine, the strata receiving
//! treatment factors. Each entry is optimized with the designs of the
//! coarser entries held fixed and copied down onto its units, blocking by
//! every coarser stratum. The whole chain is repeated from many random
//! starts and the best final design is kept.
//!
//! Exchanging one row changes X'QX by a symmetric rank-2 term, so
//! candidate moves are scored with the determinant lemma and the Woodbury
//! identity in O(p^2) each. The state is rebuilt from scratch after every
//! pass, and a pass whose rebuilt value falls below its starting value is
//! undone, so recorded trajectories never decrease.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::criteria::{
    bipartite_rank, compound_criterion, criterion_components, log_criterion, q_matrix, BlockingScheme, Blocks,
    CriterionContext, CriterionWeights, FQuantiles,
};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, PivotedQr, RANK_TOL};
use crate::model::{build_model_matrix, level_key, CompiledModel, Factor, LevelTable, Term, TermSpec, TreatmentIndicator};
use crate::structure::UnitStructure;

/// Allowed level combinations for the factors of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    points: LevelTable,
    provenance: String,
}

impl CandidateSet {
    /// Every combination of the factors' levels, first factor varying
    /// slowest.
    pub fn full_factorial(factors: &[Factor]) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Plan("candidate set needs at least one factor".into()));
        }
        let mut rows: Vec<Vec<f64>> = vec![vec![]];
        for f in factors {
            if f.levels.len() < 2 {
                return Err(Error::Model(format!("factor `{}` needs at least two levels", f.name)));
            }
            rows = rows
                .into_iter()
                .flat_map(|r| {
                    f.levels.iter().map(move |&l| {
                        let mut r = r.clone();
                        r.push(l);
                        r
                    })
                })
                .collect();
        }
        let names = factors.iter().map(|f| f.name.clone()).collect();
        let sizes: Vec<String> = factors.iter().map(|f| f.levels.len().to_string()).collect();
        Self::from_points(LevelTable::new(names, &rows)?, &format!("full factorial {}", sizes.join("x")))
    }

    pub fn from_points(points: LevelTable, provenance: &str) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Plan("candidate set is empty".into()));
        }
        let mut seen = HashSet::new();
        for r in points.rows() {
            if !seen.insert(level_key(r)) {
                return Err(Error::Plan("candidate set has repeated points".into()));
            }
        }
        Ok(Self { points, provenance: provenance.to_string() })
    }

    /// Keeps the points satisfying `keep`.
    pub fn filter(self, description: &str, keep: impl Fn(&[f64]) -> bool) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.points.rows().filter(|r| keep(r)).map(<[f64]>::to_vec).collect();
        let names = self.points.names().to_vec();
        Self::from_points(LevelTable::new(names, &rows)?, &format!("{}, {}", self.provenance, description))
    }

    /// Drops the points at which every listed factor takes the listed level.
    pub fn exclude(self, levels: &[(String, f64)]) -> Result<Self> {
        let idx: Vec<(usize, f64)> =
            levels.iter().map(|(n, v)| Ok((self.points.column_index(n)?, *v))).collect::<Result<_>>()?;
        let desc = format!(
            "excluding {}",
            levels.iter().map(|(n, v)| format!("{n}={v}")).collect::<Vec<_>>().join(" & ")
        );
        self.filter(&desc, |r| !idx.iter().all(|&(j, v)| r[j] == v))
    }

    pub fn points(&self) -> &LevelTable {
        &self.points
    }

    pub fn names(&self) -> &[String] {
        self.points.names()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// Level combinations assigned to the units of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumDesign {
    pub stratum: String,
    /// Levels of the factors optimized in this stratum.
    pub rows: LevelTable,
    /// Levels copied down from coarser strata; never modified here.
    pub inherited: LevelTable,
}

/// Terms in inherited factors only whose columns, after removing the
/// blocking, add nothing to the terms kept before them. They are confounded
/// with blocks and are estimated in a coarser stratum instead.
fn absorbed_terms(spec: &TermSpec, inherited: &LevelTable, factors: &[String], q: &DenseMatrix) -> Result<Vec<Term>> {
    if inherited.ncols() == 0 {
        return Ok(vec![]);
    }
    let mut kept: Vec<DenseMatrix> = Vec::new();
    let mut out = Vec::new();
    let mut scale = 1.0f64;
    for t in spec.terms().iter().filter(|t| !factors.iter().any(|f| t.involves(f))) {
        let x = TermSpec::custom(vec![t.clone()])
            .with_max_exponent(spec.max_exponent())
            .compile(inherited.names())?
            .matrix(inherited);
        let qx = q * &x;
        scale = scale.max(x.norm());
        let mut parts: Vec<&DenseMatrix> = kept.iter().collect();
        parts.push(&qx);
        let pivots = PivotedQr::new(&linalg::hstack(&parts))?.pivots();
        let r = pivots.iter().filter(|&&d| d > RANK_TOL * scale).count();
        if r > kept.len() {
            kept.push(qx);
        } else {
            out.push(t.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum PureErrorRule {
    Off,
    Crd,
    Blocked(Blocks),
    Rank { nuisance_rank: usize },
}

/// The fixed part of a single-stratum optimization problem.
#[derive(Debug, Clone)]
pub struct StratumProblem {
    m: usize,
    scheme: BlockingScheme,
    q: DenseMatrix,
    inherited: LevelTable,
    inherited_ids: Vec<usize>,
    factors: Vec<String>,
    spec: TermSpec,
    model: CompiledModel,
    p1: usize,
    wv: Vec<f64>,
    weights: CriterionWeights,
    pe: PureErrorRule,
}

impl StratumProblem {
    /// `inherited` holds the frozen columns (it may have no columns);
    /// `factors` names the columns being optimized. The model may mention
    /// any of both.
    pub fn new(
        scheme: BlockingScheme,
        inherited: LevelTable,
        factors: Vec<String>,
        spec: &TermSpec,
        weights: CriterionWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let m = scheme.m();
        if inherited.ncols() > 0 && inherited.nrows() != m {
            return Err(Error::Dimension(format!("{} inherited rows for {m} units", inherited.nrows())));
        }
        if spec.is_empty() {
            return Err(Error::Model("model has no terms".into()));
        }
        let mut names = inherited.names().to_vec();
        for f in &factors {
            if names.contains(f) {
                return Err(Error::Plan(format!("factor `{f}` is both inherited and optimized")));
            }
            names.push(f.clone());
        }
        let q = q_matrix(&scheme)?;
        let absorbed = absorbed_terms(spec, &inherited, &factors, &q)?;
        let spec = &spec.clone().without(&absorbed);
        if spec.is_empty() {
            return Err(Error::Model("every model term is absorbed by the blocking".into()));
        }
        let model = spec.compile(&names)?;
        let wv = weights.w.resolve(spec)?;
        let pe = if !weights.needs_pure_error() {
            PureErrorRule::Off
        } else {
            match &scheme {
                BlockingScheme::Crd { .. } => PureErrorRule::Crd,
                BlockingScheme::Blocked(b) => PureErrorRule::Blocked(b.clone()),
                other => PureErrorRule::Rank { nuisance_rank: linalg::rank(&other.nuisance())? },
            }
        };
        let mut ids = HashMap::new();
        let inherited_ids = (0..m)
            .map(|i| {
                let next = ids.len();
                *ids.entry(level_key(inherited_row(&inherited, i))).or_insert(next)
            })
            .collect();
        let p1 = model.len();
        Ok(Self {
            m,
            scheme,
            q,
            inherited,
            inherited_ids,
            factors,
            spec: spec.clone(),
            model,
            p1,
            wv,
            weights,
            pe,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn scheme(&self) -> &BlockingScheme {
        &self.scheme
    }

    pub fn weights(&self) -> &CriterionWeights {
        &self.weights
    }

    pub fn inherited(&self) -> &LevelTable {
        &self.inherited
    }

    /// ln of the criterion value of `rows`; negative infinity for zero.
    pub fn log_value(&self, rows: &LevelTable) -> Result<f64> {
        self.check_rows(rows)?;
        let mut reg = Registry::default();
        Ok(State::new(self, rows.clone(), &mut reg).logv)
    }

    /// The criterion context of `rows`, for reporting.
    pub fn context(&self, rows: &LevelTable) -> Result<CriterionContext> {
        let all = LevelTable::hstack(&self.inherited, rows)?;
        let x = build_model_matrix(&all, &self.spec)?;
        CriterionContext::new(self.scheme.clone(), x, TreatmentIndicator::from_rows(&all), self.spec.clone())
    }

    fn check_rows(&self, rows: &LevelTable) -> Result<()> {
        if rows.nrows() != self.m || rows.names() != self.factors.as_slice() {
            return Err(Error::Dimension(format!(
                "design has {} rows with columns {:?}; expected {} rows with {:?}",
                rows.nrows(),
                rows.names(),
                self.m,
                self.factors
            )));
        }
        Ok(())
    }

    fn model_row(&self, i: usize, levels: &[f64], buf: &mut Vec<f64>, out: &mut [f64]) {
        buf.clear();
        buf.extend_from_slice(inherited_row(&self.inherited, i));
        buf.extend_from_slice(levels);
        self.model.row_into(buf, out);
    }

    fn pure_error(&self, codes: &[u64]) -> usize {
        match &self.pe {
            PureErrorRule::Off => 0,
            PureErrorRule::Crd => {
                let distinct: HashSet<u64> = codes.iter().copied().collect();
                self.m - distinct.len()
            }
            PureErrorRule::Blocked(b) => {
                let (labels, count) = compact(codes);
                self.m - bipartite_rank(&b.labels, b.count, &labels, count)
            }
            PureErrorRule::Rank { nuisance_rank } => {
                let (labels, count) = compact(codes);
                let mut qt = DenseMatrix::zeros(self.m, count);
                for (j, &g) in labels.iter().enumerate() {
                    for r in 0..self.m {
                        qt[(r, g)] += self.q[(r, j)];
                    }
                }
                let rank = PivotedQr::new(&qt).map(|f| f.rank(RANK_TOL)).unwrap_or(0);
                self.m - nuisance_rank - rank
            }
        }
    }
}

fn inherited_row(t: &LevelTable, i: usize) -> &[f64] {
    if t.ncols() == 0 {
        &[]
    } else {
        t.row(i)
    }
}

fn compact(codes: &[u64]) -> (Vec<usize>, usize) {
    let mut map = HashMap::with_capacity(codes.len());
    let labels = codes
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect();
    (labels, map.len())
}

/// Ids for the distinct level rows seen during one search; candidates get
/// ids equal to their index.
#[derive(Debug, Default)]
struct Registry {
    ids: HashMap<Vec<u64>, usize>,
}

impl Registry {
    fn with_candidates(c: &CandidateSet) -> Self {
        let mut r = Self::default();
        for row in c.points().rows() {
            r.id(row);
        }
        r
    }

    fn id(&mut self, levels: &[f64]) -> usize {
        let next = self.ids.len();
        *self.ids.entry(level_key(levels)).or_insert(next)
    }
}

fn code(inherited: usize, current: usize) -> u64 {
    ((inherited as u64) << 32) | current as u64
}

/// Mutable search state for one stratum design.
struct State {
    rows: LevelTable,
    ids: Vec<usize>,
    codes: Vec<u64>,
    x: DenseMatrix,
    /// X'Q
    g: DenseMatrix,
    a: DenseMatrix,
    b: Option<DenseMatrix>,
    log_det: Option<f64>,
    trace: f64,
    d: usize,
    logv: f64,
    fq: FQuantiles,
}

impl State {
    fn new(p: &StratumProblem, rows: LevelTable, reg: &mut Registry) -> Self {
        let ids: Vec<usize> = rows.rows().map(|r| reg.id(r)).collect();
        let codes = ids.iter().enumerate().map(|(i, &c)| code(p.inherited_ids[i], c)).collect();
        let mut s = Self {
            rows,
            ids,
            codes,
            x: DenseMatrix::zeros(p.m, p.p1),
            g: DenseMatrix::zeros(p.p1, p.m),
            a: DenseMatrix::zeros(p.p1, p.p1),
            b: None,
            log_det: None,
            trace: f64::INFINITY,
            d: 0,
            logv: f64::NEG_INFINITY,
            fq: FQuantiles::new(p.p1, &p.weights),
        };
        s.refresh(p);
        s
    }

    fn refresh(&mut self, p: &StratumProblem) {
        let mut buf = Vec::new();
        let mut out = vec![0.0; p.p1];
        for i in 0..p.m {
            p.model_row(i, self.rows.row(i), &mut buf, &mut out);
            for (j, v) in out.iter().enumerate() {
                self.x[(i, j)] = *v;
            }
        }
        let qx = &p.q * &self.x;
        self.a = linalg::symmetrize(&(self.x.transpose() * &qx));
        self.g = qx.transpose();
        self.b = linalg::inverse_spd(&self.a);
        self.log_det = self.b.as_ref().and_then(|_| linalg::log_det_spd(&self.a));
        self.trace = self.b.as_ref().map_or(f64::INFINITY, |b| linalg::weighted_trace(&p.wv, b));
        self.d = p.pure_error(&self.codes);
        self.logv = log_criterion(&p.weights, &mut self.fq, p.m, self.d, p.p1, self.log_det, self.trace);
    }

    fn d_with(&self, p: &StratumProblem, i: usize, new_code: u64) -> usize {
        if matches!(p.pe, PureErrorRule::Off) || new_code == self.codes[i] {
            return self.d;
        }
        let mut codes = self.codes.clone();
        codes[i] = new_code;
        p.pure_error(&codes)
    }
}

/// Cached quantities for scoring exchanges at one row.
struct RowCache {
    xi: DVector<f64>,
    bxi: DVector<f64>,
    gi: DVector<f64>,
    bg: DVector<f64>,
    qii: f64,
    m22: f64,
    h22: f64,
}

struct Trial {
    logv: f64,
    log_det: Option<f64>,
    ratio: f64,
    y1: DVector<f64>,
    delta: DVector<f64>,
    m11: f64,
    m12: f64,
    trace: f64,
    d: usize,
}

/// Smallest determinant ratio accepted as nonsingular by the fast path.
const RATIO_FLOOR: f64 = 1e-10;

impl State {
    fn row_cache(&self, p: &StratumProblem, b: &DenseMatrix, i: usize) -> RowCache {
        let xi = self.x.row(i).transpose();
        let gi = self.g.column(i).into_owned();
        let bxi = b * &xi;
        let bg = b * &gi;
        let m22 = gi.dot(&bg);
        let h22 = linalg::weighted_dot(&bg, &p.wv, &bg);
        RowCache { xi, bxi, gi, bg, qii: p.q[(i, i)], m22, h22 }
    }

    fn trial(&mut self, p: &StratumProblem, b: &DenseMatrix, rc: &RowCache, xc: &DVector<f64>, d: usize) -> Trial {
        let delta = xc - &rc.xi;
        let y1 = b * xc - &rc.bxi;
        let m11 = delta.dot(&y1);
        let m12 = delta.dot(&rc.bg);
        let e12 = 1.0 + m12;
        let e22 = rc.m22 - rc.qii;
        let ratio = e12 * e12 - m11 * e22;
        let mut t =
            Trial { logv: f64::NEG_INFINITY, log_det: None, ratio, y1, delta, m11, m12, trace: f64::INFINITY, d };
        if !(ratio > RATIO_FLOOR) {
            return t;
        }
        let log_det = self.log_det.map(|l| l + ratio.ln());
        let mut trace = self.trace;
        if p.weights.needs_trace() {
            let h11 = linalg::weighted_dot(&t.y1, &p.wv, &t.y1);
            let h12 = linalg::weighted_dot(&t.y1, &p.wv, &rc.bg);
            trace -= (e22 * h11 - 2.0 * e12 * h12 + m11 * rc.h22) / -ratio;
            if !(trace > 0.0) {
                return t;
            }
        }
        t.trace = trace;
        t.log_det = log_det;
        t.logv = log_criterion(&p.weights, &mut self.fq, p.m, d, p.p1, log_det, trace);
        t
    }

    /// Best value `t` could reach with any pure-error count one away from its
    /// own. Moving a single unit changes the pure-error df by at most one.
    fn bound(&mut self, p: &StratumProblem, t: &Trial) -> f64 {
        if t.log_det.is_none() {
            return f64::NEG_INFINITY;
        }
        let lo = t.d.saturating_sub(1);
        let hi = (t.d + 1).min(p.m);
        (lo..=hi)
            .map(|d| log_criterion(&p.weights, &mut self.fq, p.m, d, p.p1, t.log_det, t.trace))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn rescore(&mut self, p: &StratumProblem, t: &mut Trial, d: usize) {
        if t.log_det.is_some() && d != t.d {
            t.logv = log_criterion(&p.weights, &mut self.fq, p.m, d, p.p1, t.log_det, t.trace);
        }
        t.d = d;
    }

    fn apply(&mut self, p: &StratumProblem, rc: &RowCache, i: usize, t: Trial, levels: &[f64], id: usize) {
        let Trial { ratio, y1, delta, m11, m12, trace, d, logv, .. } = t;
        let b = self.b.as_mut().expect("fast path needs an inverse");
        // A' = A + delta g' + g delta' + q delta delta'
        let dg = &delta * rc.gi.transpose();
        self.a += &dg + dg.transpose() + rc.qii * (&delta * delta.transpose());
        // B' = B - Y E^-1 Y', Y = [y1, B g], E = [[m11, 1+m12], [1+m12, m22-q]]
        let (e11, e12, e22) = (m11, 1.0 + m12, rc.m22 - rc.qii);
        let det_e = -ratio;
        let y2 = &rc.bg;
        let y1y1 = &y1 * y1.transpose();
        let y1y2 = &y1 * y2.transpose();
        let y2y2 = y2 * y2.transpose();
        *b -= (e22 * y1y1 - e12 * (&y1y2 + y1y2.transpose()) + e11 * y2y2) / det_e;
        for j in 0..p.m {
            let qij = p.q[(i, j)];
            if qij != 0.0 {
                let mut col = self.g.column_mut(j);
                col.axpy(qij, &delta, 1.0);
            }
        }
        for j in 0..p.p1 {
            self.x[(i, j)] += delta[j];
        }
        self.log_det = self.log_det.map(|l| l + ratio.ln());
        self.trace = trace;
        self.d = d;
        self.logv = logv;
        self.rows.row_mut(i).copy_from_slice(levels);
        self.ids[i] = id;
        self.codes[i] = code(p.inherited_ids[i], id);
    }
}

fn improves(new: f64, cur: f64) -> bool {
    if cur == f64::NEG_INFINITY {
        new > cur
    } else {
        new - cur > 1e-12 * cur.abs().max(1.0)
    }
}

/// Draws rows uniformly with replacement from `cands` until X'QX is
/// nonsingular, at most `retry_cap` times.
pub fn random_initial_design<R: Rng>(
    cands: &CandidateSet,
    problem: &StratumProblem,
    rng: &mut R,
    retry_cap: usize,
) -> Result<LevelTable> {
    let m = problem.m;
    let mut reg = Registry::with_candidates(cands);
    for _ in 0..retry_cap.max(1) {
        let pick: Vec<usize> = (0..m).map(|_| rng.gen_range(0..cands.len())).collect();
        let rows = cands.points().gather(&pick);
        if m > problem.p1 {
            let s = State::new(problem, rows.clone(), &mut reg);
            if s.b.is_some() {
                return Ok(rows);
            }
        }
    }
    Err(Error::InfeasibleStart {
        stratum: problem.factors.join(","),
        tries: retry_cap.max(1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeConfig {
    pub max_passes: usize,
    pub rel_tol: f64,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self { max_passes: 50, rel_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeOutcome {
    pub rows: LevelTable,
    /// ln of the criterion value at the start and after every pass.
    pub trajectory: Vec<f64>,
}

impl ExchangeOutcome {
    pub fn log_value(&self) -> f64 {
        *self.trajectory.last().expect("trajectory starts with the input value")
    }
}

/// Best-improvement point exchange starting from `start`.
pub fn point_exchange(
    problem: &StratumProblem,
    cands: &CandidateSet,
    start: LevelTable,
    cfg: &ExchangeConfig,
) -> Result<ExchangeOutcome> {
    problem.check_rows(&start)?;
    if cands.names() != problem.factors.as_slice() {
        return Err(Error::Dimension("candidate columns differ from the optimized factors".into()));
    }
    let mut reg = Registry::with_candidates(cands);
    let mut s = State::new(problem, start, &mut reg);
    let mut trajectory = vec![s.logv];
    let cand_rows: Vec<&[f64]> = cands.points().rows().collect();
    let mut buf = Vec::new();
    let mut xc_buf = vec![0.0; problem.p1];
    let lazy_pure_error = matches!(problem.pe, PureErrorRule::Rank { .. });

    for _ in 0..cfg.max_passes {
        let before = s.logv;
        let snapshot = (s.rows.clone(), s.ids.clone(), s.codes.clone());
        for i in 0..problem.m {
            if let Some(b) = s.b.clone() {
                let rc = s.row_cache(problem, &b, i);
                let mut best: Option<(usize, Trial)> = None;
                // Pure error depends only on the partition of units, so every
                // move of unit `i` into a new singleton group shares one count.
                let mut d_memo: HashMap<Option<u64>, usize> = HashMap::new();
                let present: HashSet<u64> =
                    s.codes.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &c)| c).collect();
                for (c, levels) in cand_rows.iter().enumerate() {
                    if s.ids[i] == c {
                        continue;
                    }
                    problem.model_row(i, levels, &mut buf, &mut xc_buf);
                    let xc = DVector::from_column_slice(&xc_buf);
                    let bar = best.as_ref().map_or(s.logv, |(_, bt)| bt.logv);
                    let new_code = code(problem.inherited_ids[i], c);
                    let t = if lazy_pure_error {
                        let mut t = s.trial(problem, &b, &rc, &xc, s.d);
                        if !improves(s.bound(problem, &t), bar) {
                            continue;
                        }
                        let key = present.contains(&new_code).then_some(new_code);
                        let d = match d_memo.get(&key) {
                            Some(&d) => d,
                            None => {
                                let d = s.d_with(problem, i, new_code);
                                d_memo.insert(key, d);
                                d
                            }
                        };
                        s.rescore(problem, &mut t, d);
                        t
                    } else {
                        let d = s.d_with(problem, i, new_code);
                        s.trial(problem, &b, &rc, &xc, d)
                    };
                    if improves(t.logv, bar) {
                        best = Some((c, t));
                    }
                }
                if let Some((c, t)) = best {
                    s.apply(problem, &rc, i, t, cand_rows[c], c);
                }
            } else {
                // No inverse to update: score each move by rebuilding.
                let mut best: Option<(usize, f64)> = None;
                for (c, levels) in cand_rows.iter().enumerate() {
                    if s.ids[i] == c {
                        continue;
                    }
                    let mut rows = s.rows.clone();
                    rows.row_mut(i).copy_from_slice(levels);
                    let v = State::new(problem, rows, &mut reg).logv;
                    if improves(v, best.map_or(s.logv, |b| b.1)) {
                        best = Some((c, v));
                    }
                }
                if let Some((c, _)) = best {
                    s.rows.row_mut(i).copy_from_slice(cand_rows[c]);
                    s.ids[i] = c;
                    s.codes[i] = code(problem.inherited_ids[i], c);
                    s.refresh(problem);
                }
            }
        }
        s.refresh(problem);
        if s.logv < before || s.logv.is_nan() {
            let (rows, ids, codes) = snapshot;
            s.rows = rows;
            s.ids = ids;
            s.codes = codes;
            s.refresh(problem);
            break;
        }
        trajectory.push(s.logv);
        let gained = if before == f64::NEG_INFINITY {
            s.logv > before
        } else {
            (s.logv - before).exp_m1() >= cfg.rel_tol
        };
        if !gained {
            break;
        }
    }
    Ok(ExchangeOutcome { rows: s.rows, trajectory })
}

/// Swaps the optimized levels of whole cells between different groups when
/// the cells carry identical inherited levels, while the swap strictly
/// improves the criterion of `problem`.
///
/// `cells[k]` lists the unit indices of cell `k` in a fixed order and
/// `groups[k]` is its group. A swap exchanges the rows of two cells unit by
/// unit, so the cells must have equal sizes.
pub fn constrained_interchange(
    problem: &StratumProblem,
    start: LevelTable,
    cells: &[Vec<usize>],
    groups: &[usize],
    max_passes: usize,
) -> Result<ExchangeOutcome> {
    problem.check_rows(&start)?;
    if cells.len() != groups.len() {
        return Err(Error::Dimension("one group label per cell is required".into()));
    }
    let key = |cell: &[usize]| -> Vec<u64> {
        cell.iter().flat_map(|&u| level_key(inherited_row(&problem.inherited, u))).collect()
    };
    let keys: Vec<Vec<u64>> = cells.iter().map(|c| key(c)).collect();
    let mut pairs = Vec::new();
    for a in 0..cells.len() {
        for b in (a + 1)..cells.len() {
            if groups[a] != groups[b] && cells[a].len() == cells[b].len() && keys[a] == keys[b] {
                pairs.push((a, b));
            }
        }
    }
    let swapped = |rows: &LevelTable, a: usize, b: usize| {
        let mut out = rows.clone();
        for (&u, &v) in cells[a].iter().zip(&cells[b]) {
            out.row_mut(u).copy_from_slice(rows.row(v));
            out.row_mut(v).copy_from_slice(rows.row(u));
        }
        out
    };
    let mut rows = start;
    let mut cur = problem.log_value(&rows)?;
    let mut trajectory = vec![cur];
    for _ in 0..max_passes {
        let mut best: Option<(usize, usize, f64)> = None;
        for &(a, b) in &pairs {
            let v = problem.log_value(&swapped(&rows, a, b))?;
            if improves(v, best.map_or(cur, |x| x.2)) {
                best = Some((a, b, v));
            }
        }
        let Some((a, b, v)) = best else { break };
        rows = swapped(&rows, a, b);
        cur = v;
        trajectory.push(cur);
    }
    Ok(ExchangeOutcome { rows, trajectory })
}

/// Blocking structure and factors of a multi-stratum experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub structure: UnitStructure,
    pub factors: Vec<Factor>,
}

impl Problem {
    pub fn factor(&self, name: &str) -> Result<&Factor> {
        self.factors.iter().find(|f| f.name == name).ok_or_else(|| Error::UnknownFactor(name.to_string()))
    }
}

/// Nuisance structure of a plan entry.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockingChoice {
    /// Block by every coarser stratum.
    Derived,
    Crd,
    /// Block by the listed strata.
    Strata(Vec<String>),
}

/// Post-pass swapping whole cells between groups.
#[derive(Debug, Clone, PartialEq)]
pub struct InterchangeSpec {
    /// Stratum whose units are the groups (blocks) swapped between.
    pub groups: String,
    /// Stratum whose units are moved as a whole.
    pub cells: String,
    /// Model for the higher-stratum criterion, over all factors so far.
    pub model: TermSpec,
    /// Criterion weights; the entry's own when `None`.
    pub weights: Option<CriterionWeights>,
    pub max_passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub stratum: String,
    /// Factors optimized here; empty for an entry that only names a
    /// treatment set for the ANOVA.
    pub factors: Vec<String>,
    /// Full factorial of the factors' levels when `None`.
    pub candidates: Option<CandidateSet>,
    pub model: TermSpec,
    pub weights: CriterionWeights,
    pub blocking: BlockingChoice,
    pub interchange: Option<InterchangeSpec>,
}

impl PlanEntry {
    pub fn new(stratum: &str, factors: &[&str], model: TermSpec, weights: CriterionWeights) -> Self {
        Self {
            stratum: stratum.to_string(),
            factors: factors.iter().map(|s| s.to_string()).collect(),
            candidates: None,
            model,
            weights,
            blocking: BlockingChoice::Derived,
            interchange: None,
        }
    }

    pub fn with_candidates(mut self, c: CandidateSet) -> Self {
        self.candidates = Some(c);
        self
    }

    pub fn with_interchange(mut self, i: InterchangeSpec) -> Self {
        self.interchange = Some(i);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionPlan {
    pub entries: Vec<PlanEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub n_starts: usize,
    pub seed: u64,
    pub max_passes: usize,
    pub rel_tol: f64,
    pub retry_cap: usize,
    /// Worker threads; all available cores when `None`.
    pub jobs: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { n_starts: 100, seed: 1, max_passes: 50, rel_tol: 1e-9, retry_cap: 1000, jobs: None }
    }
}

/// Blocking of stratum `s` by every coarser stratum (excluding the mean).
pub fn derived_blocking(structure: &UnitStructure, s: usize) -> Result<BlockingScheme> {
    let coarser = structure.coarser_strata(s);
    let maximal: Vec<usize> = coarser
        .iter()
        .copied()
        .filter(|&w| !coarser.iter().any(|&v| v != w && structure.is_coarser_or_equal(w, v)))
        .collect();
    blocking_by(structure, s, &maximal)
}

fn blocking_by(structure: &UnitStructure, s: usize, strata: &[usize]) -> Result<BlockingScheme> {
    let m = structure.strata()[s].units;
    let mut blocks = strata
        .iter()
        .map(|&w| Ok(Blocks::new(structure.coarsen(s, w)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match blocks.len() {
        0 => BlockingScheme::crd(m),
        1 => BlockingScheme::Blocked(blocks.remove(0)),
        2 => {
            let rc = BlockingScheme::RowColumn { rows: blocks[0].clone(), cols: blocks[1].clone() };
            if rc.validate().is_ok() {
                rc
            } else {
                BlockingScheme::Crossed(blocks)
            }
        }
        _ => BlockingScheme::Crossed(blocks),
    })
}

#[derive(Debug, Clone)]
struct ResolvedInterchange {
    cells: Vec<Vec<usize>>,
    groups: Vec<usize>,
    scheme: BlockingScheme,
    model: TermSpec,
    weights: CriterionWeights,
    max_passes: usize,
}

#[derive(Debug, Clone)]
struct ResolvedEntry {
    stratum: usize,
    label: String,
    factors: Vec<String>,
    candidates: Option<CandidateSet>,
    scheme: BlockingScheme,
    model: TermSpec,
    weights: CriterionWeights,
    /// Earlier entries feeding inherited columns, with their unit maps.
    sources: Vec<(usize, Vec<usize>)>,
    interchange: Option<ResolvedInterchange>,
}

/// A plan checked against a problem.
#[derive(Debug, Clone)]
pub struct ResolvedPlan {
    entries: Vec<ResolvedEntry>,
    /// For each entry, the map from bottom-stratum units to its units.
    to_bottom: Vec<Vec<usize>>,
    n: usize,
}

impl ConstructionPlan {
    pub fn resolve(&self, problem: &Problem) -> Result<ResolvedPlan> {
        let st = &problem.structure;
        let mut covered: Vec<&str> = Vec::new();
        let mut entries: Vec<ResolvedEntry> = Vec::new();
        for e in &self.entries {
            let s = st.stratum_index(&e.stratum)?;
            if s == 0 {
                return Err(Error::Plan("the mean stratum cannot receive factors".into()));
            }
            if let Some(prev) = entries.last() {
                if s <= prev.stratum {
                    return Err(Error::Plan(format!(
                        "entry for `{}` must come after `{}` in coarse-to-fine order",
                        e.stratum, prev.label
                    )));
                }
            }
            for f in &e.factors {
                let decl = problem.factor(f)?;
                if st.stratum_index(&decl.stratum)? != s {
                    return Err(Error::Plan(format!(
                        "factor `{f}` belongs to stratum `{}`, not `{}`",
                        decl.stratum, e.stratum
                    )));
                }
                if covered.contains(&f.as_str()) {
                    return Err(Error::Plan(format!("factor `{f}` is optimized twice")));
                }
                covered.push(f);
            }
            let sources = entries
                .iter()
                .enumerate()
                .filter(|(_, prev)| st.is_coarser_or_equal(prev.stratum, s))
                .map(|(k, prev)| Ok((k, st.coarsen(s, prev.stratum)?)))
                .collect::<Result<Vec<_>>>()?;
            let scheme = match &e.blocking {
                BlockingChoice::Derived => derived_blocking(st, s)?,
                BlockingChoice::Crd => BlockingScheme::crd(st.strata()[s].units),
                BlockingChoice::Strata(list) => {
                    let idx = list.iter().map(|l| st.stratum_index(l)).collect::<Result<Vec<_>>>()?;
                    blocking_by(st, s, &idx)?
                }
            };
            let candidates = match (&e.candidates, e.factors.is_empty()) {
                (_, true) => None,
                (Some(c), false) => {
                    if c.names() != e.factors.as_slice() {
                        return Err(Error::Plan(format!("candidate columns for `{}` differ from its factors", e.stratum)));
                    }
                    Some(c.clone())
                }
                (None, false) => {
                    let fs = e.factors.iter().map(|f| problem.factor(f).cloned()).collect::<Result<Vec<_>>>()?;
                    Some(CandidateSet::full_factorial(&fs)?)
                }
            };
            e.model.validate()?;
            e.weights.validate()?;
            let interchange = match &e.interchange {
                None => None,
                Some(spec) => {
                    let g = st.stratum_index(&spec.groups)?;
                    let c = st.stratum_index(&spec.cells)?;
                    if !st.is_coarser_or_equal(g, c) || !st.is_coarser_or_equal(c, s) {
                        return Err(Error::Plan("interchange needs groups coarser than cells coarser than the entry".into()));
                    }
                    let cell_of = st.coarsen(s, c)?;
                    let mut cells = vec![Vec::new(); st.strata()[c].units];
                    for (u, &k) in cell_of.iter().enumerate() {
                        cells[k].push(u);
                    }
                    Some(ResolvedInterchange {
                        cells,
                        groups: st.coarsen(c, g)?,
                        scheme: BlockingScheme::blocked(st.coarsen(s, g)?),
                        model: spec.model.clone(),
                        weights: spec.weights.clone().unwrap_or_else(|| e.weights.clone()),
                        max_passes: spec.max_passes,
                    })
                }
            };
            entries.push(ResolvedEntry {
                stratum: s,
                label: st.strata()[s].label.clone(),
                factors: e.factors.clone(),
                candidates,
                scheme,
                model: e.model.clone(),
                weights: e.weights.clone(),
                sources,
                interchange,
            });
        }
        if let Some(f) = problem.factors.iter().find(|f| !covered.contains(&f.name.as_str())) {
            return Err(Error::Plan(format!("factor `{}` is not assigned to any entry", f.name)));
        }
        let bottom = st.bottom();
        let to_bottom = entries.iter().map(|e| st.coarsen(bottom, e.stratum)).collect::<Result<_>>()?;
        Ok(ResolvedPlan { entries, to_bottom, n: st.n() })
    }
}

impl ResolvedPlan {
    fn inherited(&self, k: usize, designs: &[LevelTable]) -> Result<LevelTable> {
        let e = &self.entries[k];
        let mut out = LevelTable::zeros(vec![], 0);
        for (src, map) in &e.sources {
            if designs[*src].ncols() > 0 {
                out = LevelTable::hstack(&out, &designs[*src].gather(map))?;
            }
        }
        Ok(out)
    }

    fn problem(&self, k: usize, designs: &[LevelTable]) -> Result<StratumProblem> {
        let e = &self.entries[k];
        StratumProblem::new(e.scheme.clone(), self.inherited(k, designs)?, e.factors.clone(), &e.model, e.weights.clone())
    }

    /// Assembles entry designs into one table over all units.
    fn assemble(&self, designs: &[LevelTable]) -> Result<LevelTable> {
        let mut out = LevelTable::zeros(vec![], 0);
        for (d, map) in designs.iter().zip(&self.to_bottom) {
            if d.ncols() > 0 {
                out = LevelTable::hstack(&out, &d.gather(map))?;
            }
        }
        debug_assert!(out.ncols() == 0 || out.nrows() == self.n);
        Ok(out)
    }

    fn run_start(&self, cfg: &SearchConfig, start: usize) -> Result<StartOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(start as u64);
        let ex = ExchangeConfig { max_passes: cfg.max_passes, rel_tol: cfg.rel_tol };
        let mut designs: Vec<LevelTable> = Vec::with_capacity(self.entries.len());
        let mut trajectories = Vec::with_capacity(self.entries.len());
        let mut final_value = f64::NEG_INFINITY;
        for (k, e) in self.entries.iter().enumerate() {
            let Some(cands) = &e.candidates else {
                designs.push(LevelTable::zeros(vec![], 0));
                trajectories.push(Trajectories::default());
                continue;
            };
            let problem = self.problem(k, &designs).map_err(|err| match err {
                Error::InfeasibleStart { tries, .. } => Error::InfeasibleStart { stratum: e.label.clone(), tries },
                other => other,
            })?;
            let init = random_initial_design(cands, &problem, &mut rng, cfg.retry_cap).map_err(|err| match err {
                Error::InfeasibleStart { tries, .. } => Error::InfeasibleStart { stratum: e.label.clone(), tries },
                other => other,
            })?;
            let out = point_exchange(&problem, cands, init, &ex)?;
            final_value = out.log_value();
            let mut t = Trajectories { exchange: out.trajectory, interchange: Vec::new() };
            let mut rows = out.rows;
            if let Some(ic) = &e.interchange {
                let hp =
                    StratumProblem::new(ic.scheme.clone(), problem.inherited.clone(), e.factors.clone(), &ic.model, ic.weights.clone())?;
                let swapped = constrained_interchange(&hp, rows, &ic.cells, &ic.groups, ic.max_passes)?;
                t.interchange = swapped.trajectory;
                rows = swapped.rows;
                final_value = problem.log_value(&rows)?;
            }
            trajectories.push(t);
            designs.push(rows);
        }
        let design = self.assemble(&designs)?;
        Ok(StartOutcome { designs, design, final_value, trajectories })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectories {
    pub exchange: Vec<f64>,
    pub interchange: Vec<f64>,
}

#[derive(Debug, Clone)]
struct StartOutcome {
    designs: Vec<LevelTable>,
    design: LevelTable,
    final_value: f64,
    trajectories: Vec<Trajectories>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stratum: String,
    pub m: usize,
    pub p: usize,
    pub value: f64,
    pub d_value: f64,
    pub a_value: f64,
    pub pure_error_df: usize,
    pub lack_of_fit_df: usize,
    pub trajectories: Trajectories,
    /// Higher-stratum criterion before and after the interchange pass.
    pub interchange: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstructionResult {
    /// All factors over all units, in canonical unit order.
    pub design: LevelTable,
    pub stages: Vec<StratumDesign>,
    pub reports: Vec<StageReport>,
    pub best_start: usize,
}

/// Runs the plan from `cfg.n_starts` random starts and keeps the design with
/// the best criterion for the last entry that optimizes factors.
pub fn construct_multistratum(problem: &Problem, plan: &ConstructionPlan, cfg: &SearchConfig) -> Result<ConstructionResult> {
    if cfg.n_starts == 0 {
        return Err(Error::Plan("at least one start is required".into()));
    }
    let resolved = plan.resolve(problem)?;
    let run = || -> Vec<Result<StartOutcome>> {
        (0..cfg.n_starts).into_par_iter().map(|s| resolved.run_start(cfg, s)).collect()
    };
    let outcomes = match cfg.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut best: Option<(usize, StartOutcome)> = None;
    for (s, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        let better = match &best {
            None => true,
            Some((_, b)) => match o.final_value.total_cmp(&b.final_value) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => o.design.total_cmp(&b.design) == Ordering::Less,
            },
        };
        if better {
            best = Some((s, o));
        }
    }
    let (best_start, outcome) = best.expect("at least one start");
    resolved.report(best_start, outcome)
}

impl ResolvedPlan {
    fn report(&self, best_start: usize, o: StartOutcome) -> Result<ConstructionResult> {
        let mut stages = Vec::new();
        let mut reports = Vec::new();
        for (k, e) in self.entries.iter().enumerate() {
            if e.candidates.is_none() {
                continue;
            }
            let problem = self.problem(k, &o.designs)?;
            let ctx = problem.context(&o.designs[k])?;
            let value = compound_criterion(&ctx, &e.weights)?.value;
            let comps = criterion_components(&ctx, &e.weights.w)?;
            let interchange = match &e.interchange {
                Some(_) => {
                    let t = &o.trajectories[k].interchange;
                    Some((t.first().copied().unwrap_or(f64::NAN).exp(), t.last().copied().unwrap_or(f64::NAN).exp()))
                }
                None => None,
            };
            reports.push(StageReport {
                stratum: e.label.clone(),
                m: problem.m,
                p: ctx.p,
                value,
                d_value: comps.d_value,
                a_value: comps.a_value,
                pure_error_df: comps.d,
                lack_of_fit_df: comps.lack_of_fit,
                trajectories: o.trajectories[k].clone(),
                interchange,
            });
            stages.push(StratumDesign { stratum: e.label.clone(), rows: o.designs[k].clone(), inherited: problem.inherited.clone() });
        }
        Ok(ConstructionResult { design: o.design, stages, reports, best_start })
    }
}

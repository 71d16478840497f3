//! Nuisance projectors, pure-error degrees of freedom and the compound
//! optimality criterion used within one stratum.
//!
//! For a stratum with `m` units, model matrix `X` (intercept excluded) and
//! projector `Q` removing the effects of higher-stratum blocking, the
//! compound criterion is
//!
//! ```text
//! |X'QX|^((kD + kDP) / (p - 1)) * (m - d)^kDF
//!   / ( F(p-1, d; 1-aDP)^kDP * F(1, d; 1-aLP)^kLP * tr(W (X'QX)^-1)^(kL + kLP) )
//! ```
//!
//! where `d` is the number of pure-error degrees of freedom. It is evaluated
//! in log space.

use crate::error::{Error, Result};
use crate::fdist::f_quantile;
use crate::linalg::{self, hstack, DenseMatrix};
use crate::model::{ModelMatrix, TermSpec, TreatmentIndicator};
use crate::structure::indicator;

/// Labels of one blocking factor: `labels[i]` is the block of unit `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocks {
    pub labels: Vec<usize>,
    pub count: usize,
}

impl Blocks {
    pub fn new(labels: Vec<usize>) -> Self {
        let count = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, count }
    }

    pub fn matrix(&self) -> DenseMatrix {
        indicator(&self.labels, self.count)
    }

    fn validate(&self, m: usize) -> Result<()> {
        if self.labels.len() != m {
            return Err(Error::Dimension(format!("{} block labels for {m} units", self.labels.len())));
        }
        let mut sizes = vec![0usize; self.count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        if sizes.contains(&0) {
            return Err(Error::Dimension("empty block".into()));
        }
        Ok(())
    }
}

/// Nuisance structure of a stratum, induced by the strata above it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockingScheme {
    /// Completely randomized: only the mean is a nuisance.
    Crd { m: usize },
    Blocked(Blocks),
    RowColumn { rows: Blocks, cols: Blocks },
    /// Any number of blocking factors, handled numerically. Used for three or
    /// more, or for two that do not form an equally replicated row-column grid.
    Crossed(Vec<Blocks>),
}

impl BlockingScheme {
    pub fn crd(m: usize) -> Self {
        Self::Crd { m }
    }

    pub fn blocked(labels: Vec<usize>) -> Self {
        Self::Blocked(Blocks::new(labels))
    }

    pub fn row_column(rows: Vec<usize>, cols: Vec<usize>) -> Self {
        Self::RowColumn { rows: Blocks::new(rows), cols: Blocks::new(cols) }
    }

    pub fn m(&self) -> usize {
        match self {
            Self::Crd { m } => *m,
            Self::Blocked(b) => b.labels.len(),
            Self::RowColumn { rows, .. } => rows.labels.len(),
            Self::Crossed(bs) => bs.first().map_or(0, |b| b.labels.len()),
        }
    }

    pub fn factors(&self) -> Vec<&Blocks> {
        match self {
            Self::Crd { .. } => vec![],
            Self::Blocked(b) => vec![b],
            Self::RowColumn { rows, cols } => vec![rows, cols],
            Self::Crossed(bs) => bs.iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::Dimension("blocking scheme has no units".into()));
        }
        for b in self.factors() {
            b.validate(m)?;
        }
        if let Self::RowColumn { rows, cols } = self {
            let mut cells = vec![0usize; rows.count * cols.count];
            for (r, c) in rows.labels.iter().zip(&cols.labels) {
                cells[r * cols.count + c] += 1;
            }
            if cells.iter().any(|&x| x != cells[0]) {
                return Err(Error::Dimension("row-column cells are not equally replicated".into()));
            }
        }
        Ok(())
    }

    /// `[1 | Z_1 | Z_2 | ...]`.
    pub fn nuisance(&self) -> DenseMatrix {
        let one = DenseMatrix::from_element(self.m(), 1, 1.0);
        let zs: Vec<DenseMatrix> = self.factors().iter().map(|b| b.matrix()).collect();
        let mut parts: Vec<&DenseMatrix> = vec![&one];
        parts.extend(zs.iter());
        hstack(&parts)
    }
}

/// I minus the projector onto the nuisance columns of `scheme`.
pub fn q_matrix(scheme: &BlockingScheme) -> Result<DenseMatrix> {
    scheme.validate()?;
    let m = scheme.m();
    match scheme {
        BlockingScheme::Crd { .. } => {
            let w = 1.0 / m as f64;
            Ok(DenseMatrix::from_fn(m, m, |i, j| if i == j { 1.0 - w } else { -w }))
        }
        BlockingScheme::Blocked(b) => {
            let mut sizes = vec![0usize; b.count];
            for &l in &b.labels {
                sizes[l] += 1;
            }
            Ok(DenseMatrix::from_fn(m, m, |i, j| {
                let same = if b.labels[i] == b.labels[j] { 1.0 / sizes[b.labels[i]] as f64 } else { 0.0 };
                if i == j {
                    1.0 - same
                } else {
                    -same
                }
            }))
        }
        _ => linalg::residual_projector(&scheme.nuisance()),
    }
}

/// `m - rank([nuisance | T])`.
pub fn pure_error_df(scheme: &BlockingScheme, t: &TreatmentIndicator) -> Result<usize> {
    scheme.validate()?;
    let m = scheme.m();
    if t.groups.len() != m {
        return Err(Error::Dimension(format!("{} treatment rows for {m} units", t.groups.len())));
    }
    match scheme {
        BlockingScheme::Crd { .. } => Ok(m - t.count),
        BlockingScheme::Blocked(b) => Ok(m - bipartite_rank(&b.labels, b.count, &t.groups, t.count)),
        _ => pure_error_df_numeric(scheme, t),
    }
}

/// [`pure_error_df`] by a numerical rank, for any scheme.
pub fn pure_error_df_numeric(scheme: &BlockingScheme, t: &TreatmentIndicator) -> Result<usize> {
    let aug = hstack(&[&scheme.nuisance(), &t.matrix()]);
    Ok(scheme.m() - linalg::rank_checked(&aug, linalg::RANK_TOL)?)
}

/// Rank of `[Z_a | Z_b]` for two partitions of the same units: the number of
/// classes less the number of connected components of the bipartite graph
/// whose edges are the units.
pub fn bipartite_rank(a: &[usize], na: usize, b: &[usize], nb: usize) -> usize {
    let mut uf = UnionFind::new(na + nb);
    for (&x, &y) in a.iter().zip(b) {
        uf.union(x, na + y);
    }
    na + nb - uf.components()
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    sets: usize,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), sets: n }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
            self.sets -= 1;
        }
    }

    pub(crate) fn components(&self) -> usize {
        self.sets
    }
}

/// Diagonal weights for the trace term.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum WeightMatrix {
    #[default]
    Identity,
    /// Weight 1/4 on pure quadratic terms, 1 elsewhere.
    QuadraticQuarter,
    Diagonal(Vec<f64>),
}

impl WeightMatrix {
    pub fn resolve(&self, spec: &TermSpec) -> Result<Vec<f64>> {
        match self {
            Self::Identity => Ok(vec![1.0; spec.len()]),
            Self::QuadraticQuarter => {
                Ok(spec.terms().iter().map(|t| if t.is_pure_quadratic() { 0.25 } else { 1.0 }).collect())
            }
            Self::Diagonal(w) => {
                if w.len() != spec.len() {
                    return Err(Error::Weights(format!("{} weights for {} terms", w.len(), spec.len())));
                }
                if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Weights("weights must be finite and nonnegative".into()));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionWeights {
    pub kappa_d: f64,
    pub kappa_dp: f64,
    pub kappa_l: f64,
    pub kappa_lp: f64,
    pub kappa_df: f64,
    pub alpha_dp: f64,
    pub alpha_lp: f64,
    pub w: WeightMatrix,
}

impl CriterionWeights {
    /// Weights in the order (kD, kDP, kL, kLP, kDF), with both levels 0.05.
    pub fn new(kappa: [f64; 5]) -> Result<Self> {
        let w = Self {
            kappa_d: kappa[0],
            kappa_dp: kappa[1],
            kappa_l: kappa[2],
            kappa_lp: kappa[3],
            kappa_df: kappa[4],
            alpha_dp: 0.05,
            alpha_lp: 0.05,
            w: WeightMatrix::Identity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d() -> Self {
        Self::new([1.0, 0.0, 0.0, 0.0, 0.0]).expect("valid")
    }

    pub fn dp() -> Self {
        Self::new([0.0, 1.0, 0.0, 0.0, 0.0]).expect("valid")
    }

    pub fn a() -> Self {
        Self::new([0.0, 0.0, 1.0, 0.0, 0.0]).expect("valid")
    }

    pub fn with_weight_matrix(mut self, w: WeightMatrix) -> Self {
        self.w = w;
        self
    }

    pub fn with_alphas(mut self, alpha_dp: f64, alpha_lp: f64) -> Result<Self> {
        self.alpha_dp = alpha_dp;
        self.alpha_lp = alpha_lp;
        self.validate()?;
        Ok(self)
    }

    pub fn kappas(&self) -> [f64; 5] {
        [self.kappa_d, self.kappa_dp, self.kappa_l, self.kappa_lp, self.kappa_df]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kappas();
        if k.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Weights("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = k.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Weights(format!("weights sum to {sum}, not 1")));
        }
        for a in [self.alpha_dp, self.alpha_lp] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Weights(format!("significance level {a} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub(crate) fn needs_pure_error(&self) -> bool {
        self.kappa_dp > 0.0 || self.kappa_lp > 0.0 || self.kappa_df > 0.0
    }

    pub(crate) fn needs_trace(&self) -> bool {
        self.kappa_l > 0.0 || self.kappa_lp > 0.0
    }

    pub(crate) fn needs_det(&self) -> bool {
        self.kappa_d > 0.0 || self.kappa_dp > 0.0
    }
}

/// Memo of the F quantiles the criterion needs, indexed by `d`.
#[derive(Debug, Clone)]
pub(crate) struct FQuantiles {
    p1: f64,
    alpha_dp: f64,
    alpha_lp: f64,
    cache: Vec<Option<(f64, f64)>>,
}

impl FQuantiles {
    pub(crate) fn new(p1: usize, weights: &CriterionWeights) -> Self {
        Self { p1: p1 as f64, alpha_dp: weights.alpha_dp, alpha_lp: weights.alpha_lp, cache: Vec::new() }
    }

    /// `(ln F(p-1, d; 1-aDP), ln F(1, d; 1-aLP))` for `d >= 1`.
    pub(crate) fn get(&mut self, d: usize) -> (f64, f64) {
        if self.cache.len() <= d {
            self.cache.resize(d + 1, None);
        }
        if let Some(v) = self.cache[d] {
            return v;
        }
        let f1 = f_quantile(self.p1, d as f64, 1.0 - self.alpha_dp).expect("valid F arguments");
        let f2 = f_quantile(1.0, d as f64, 1.0 - self.alpha_lp).expect("valid F arguments");
        let v = (f1.ln(), f2.ln());
        self.cache[d] = Some(v);
        v
    }
}

/// Log of the compound criterion from its ingredients. `log_det` and `trace`
/// are those of X'QX and W(X'QX)^-1; `None` means X'QX is singular.
pub(crate) fn log_criterion(
    w: &CriterionWeights,
    fq: &mut FQuantiles,
    m: usize,
    d: usize,
    p1: usize,
    log_det: Option<f64>,
    trace: f64,
) -> f64 {
    let Some(log_det) = log_det else {
        return f64::NEG_INFINITY;
    };
    if d == 0 && (w.kappa_dp > 0.0 || w.kappa_lp > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut v = 0.0;
    if w.needs_det() {
        v += (w.kappa_d + w.kappa_dp) / p1 as f64 * log_det;
    }
    if w.kappa_df > 0.0 {
        v += w.kappa_df * ((m - d) as f64).ln();
    }
    if w.kappa_dp > 0.0 || w.kappa_lp > 0.0 {
        let (f1, f2) = fq.get(d);
        v -= w.kappa_dp * f1 + w.kappa_lp * f2;
    }
    if w.needs_trace() {
        v -= (w.kappa_l + w.kappa_lp) * trace.ln();
    }
    v
}

/// Everything the criterion needs about one stratum design.
#[derive(Debug, Clone)]
pub struct CriterionContext {
    pub m: usize,
    pub d: usize,
    pub p: usize,
    pub q: DenseMatrix,
    pub x: ModelMatrix,
    pub t: TreatmentIndicator,
    pub spec: TermSpec,
    scheme: BlockingScheme,
}

impl CriterionContext {
    pub fn new(scheme: BlockingScheme, x: ModelMatrix, t: TreatmentIndicator, spec: TermSpec) -> Result<Self> {
        let m = scheme.m();
        if x.x.nrows() != m || t.groups.len() != m {
            return Err(Error::Dimension(format!(
                "scheme has {m} units, model matrix {} rows, treatments {} rows",
                x.x.nrows(),
                t.groups.len()
            )));
        }
        if spec.len() != x.x.ncols() {
            return Err(Error::Dimension("term list does not match model matrix".into()));
        }
        let q = q_matrix(&scheme)?;
        let d = pure_error_df(&scheme, &t)?;
        let p = x.p();
        Ok(Self { m, d, p, q, x, t, spec, scheme })
    }

    pub fn scheme(&self) -> &BlockingScheme {
        &self.scheme
    }

    /// X'QX.
    pub fn information(&self) -> DenseMatrix {
        linalg::symmetrize(&(self.x.x.transpose() * &self.q * &self.x.x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionValue {
    pub value: f64,
    /// ln(value); negative infinity when the value is zero.
    pub log_value: f64,
    /// X'QX was singular.
    pub singular: bool,
}

pub fn compound_criterion(ctx: &CriterionContext, w: &CriterionWeights) -> Result<CriterionValue> {
    w.validate()?;
    let wv = w.w.resolve(&ctx.spec)?;
    let info = ctx.information();
    let p1 = ctx.p - 1;
    let inv = linalg::inverse_spd(&info);
    let log_det = inv.as_ref().and_then(|_| linalg::log_det_spd(&info));
    let trace = inv.as_ref().map_or(f64::INFINITY, |b| linalg::weighted_trace(&wv, b));
    let mut fq = FQuantiles::new(p1, w);
    let log_value = log_criterion(w, &mut fq, ctx.m, ctx.d, p1, log_det, trace);
    Ok(CriterionValue { value: log_value.exp(), log_value, singular: log_det.is_none() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionComponents {
    /// |X'QX|^(1/(p-1)); zero when singular.
    pub d_value: f64,
    /// tr(W (X'QX)^-1); infinite when singular.
    pub a_value: f64,
    pub d: usize,
    pub lack_of_fit: usize,
}

pub fn criterion_components(ctx: &CriterionContext, w: &WeightMatrix) -> Result<CriterionComponents> {
    let wv = w.resolve(&ctx.spec)?;
    let info = ctx.information();
    let p1 = (ctx.p - 1) as f64;
    let (d_value, a_value) = match (linalg::log_det_spd(&info), linalg::inverse_spd(&info)) {
        (Some(ld), Some(b)) => ((ld / p1).exp(), linalg::weighted_trace(&wv, &b)),
        _ => (0.0, f64::INFINITY),
    };
    let qt = &ctx.q * ctx.t.matrix();
    let qx = &ctx.q * &ctx.x.x;
    let lack_of_fit = linalg::rank_or_zero(&qt)?.saturating_sub(linalg::rank_or_zero(&qx)?);
    Ok(CriterionComponents { d_value, a_value, d: ctx.d, lack_of_fit })
}

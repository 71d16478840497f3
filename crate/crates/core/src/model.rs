//! Treatment factors, polynomial model terms and the matrices built from
//! them.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// A treatment factor applied to the units of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    /// Label of the stratum whose units receive this factor.
    pub stratum: String,
    /// Coded levels.
    pub levels: Vec<f64>,
}

impl Factor {
    pub fn new(name: &str, stratum: &str, levels: &[f64]) -> Self {
        Self { name: name.to_string(), stratum: stratum.to_string(), levels: levels.to_vec() }
    }

    /// Levels -1, 0, 1.
    pub fn three_level(name: &str, stratum: &str) -> Self {
        Self::new(name, stratum, &[-1.0, 0.0, 1.0])
    }

    /// Levels -1, 1.
    pub fn two_level(name: &str, stratum: &str) -> Self {
        Self::new(name, stratum, &[-1.0, 1.0])
    }
}

/// Rows of factor levels with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTable {
    names: Vec<String>,
    data: Vec<f64>,
}

impl LevelTable {
    pub fn new(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let k = names.len();
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::Dimension(format!("row {i} has {} values, expected {k}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { names, data })
    }

    pub fn zeros(names: Vec<String>, rows: usize) -> Self {
        let k = names.len();
        Self { names, data: vec![0.0; rows * k] }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn nrows(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.data.len() / self.names.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.ncols();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.ncols();
        &mut self.data[i * k..(i + 1) * k]
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownFactor(name.to_string()))
    }

    pub fn get(&self, i: usize, name: &str) -> Result<f64> {
        Ok(self.row(i)[self.column_index(name)?])
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.nrows()).map(move |i| self.row(i))
    }

    /// Columns `names`, in that order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names.iter().map(|n| self.column_index(n)).collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.nrows() * idx.len());
        for r in self.rows() {
            data.extend(idx.iter().map(|&j| r[j]));
        }
        Ok(Self { names: names.to_vec(), data })
    }

    /// Side-by-side concatenation. Rows must agree; the names of `b` that
    /// already occur in `a` are an error.
    pub fn hstack(a: &Self, b: &Self) -> Result<Self> {
        if a.ncols() == 0 {
            return Ok(b.clone());
        }
        if b.ncols() == 0 {
            return Ok(a.clone());
        }
        if a.nrows() != b.nrows() {
            return Err(Error::Dimension(format!("{} rows vs {} rows", a.nrows(), b.nrows())));
        }
        if let Some(dup) = b.names.iter().find(|n| a.names.contains(n)) {
            return Err(Error::Model(format!("factor `{dup}` appears twice")));
        }
        let mut names = a.names.clone();
        names.extend(b.names.iter().cloned());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.nrows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Self { names, data })
    }

    /// Rows picked by index, with repetition.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.ncols());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { names: self.names.clone(), data }
    }

    /// Row-major lexicographic comparison.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.data.iter().zip(&other.data) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                o => return o,
            }
        }
        self.data.len().cmp(&other.data.len())
    }
}

/// A monomial in the treatment factors, e.g. `X1*X2^2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    powers: Vec<(String, u32)>,
}

impl Term {
    pub fn new<S: AsRef<str>>(powers: impl IntoIterator<Item = (S, u32)>) -> Self {
        let mut merged: Vec<(String, u32)> = Vec::new();
        for (name, e) in powers {
            let name = name.as_ref();
            if e == 0 {
                continue;
            }
            match merged.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 += e,
                None => merged.push((name.to_string(), e)),
            }
        }
        merged.sort_by(|a, b| natural_cmp(&a.0, &b.0));
        Self { powers: merged }
    }

    pub fn linear(a: &str) -> Self {
        Self::new([(a, 1)])
    }

    pub fn power(a: &str, e: u32) -> Self {
        Self::new([(a, e)])
    }

    pub fn interaction(a: &str, b: &str) -> Self {
        Self::new([(a, 1), (b, 1)])
    }

    /// Parses `X1`, `X1^2`, `X1*X2`, `X1^2*X3`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut powers = Vec::new();
        for part in s.split('*').map(str::trim) {
            let (name, e) = match part.split_once('^') {
                Some((n, e)) => {
                    let e: u32 = e.trim().parse().map_err(|_| Error::Model(format!("bad exponent in `{s}`")))?;
                    (n.trim(), e)
                }
                None => (part, 1),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                return Err(Error::Model(format!("bad term `{s}`")));
            }
            if e == 0 {
                return Err(Error::Model(format!("zero exponent in `{s}`")));
            }
            powers.push((name.to_string(), e));
        }
        Ok(Self::new(powers))
    }

    pub fn powers(&self) -> &[(String, u32)] {
        &self.powers
    }

    pub fn degree(&self) -> u32 {
        self.powers.iter().map(|p| p.1).sum()
    }

    pub fn max_exponent(&self) -> u32 {
        self.powers.iter().map(|p| p.1).max().unwrap_or(0)
    }

    /// A single factor squared.
    pub fn is_pure_quadratic(&self) -> bool {
        self.powers.len() == 1 && self.powers[0].1 == 2
    }

    pub fn involves(&self, factor: &str) -> bool {
        self.powers.iter().any(|(n, _)| n == factor)
    }

    pub fn product(&self, other: &Self) -> Self {
        Self::new(self.powers.iter().chain(&other.powers).map(|(n, e)| (n.as_str(), *e)))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, e)) in self.powers.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            if *e == 1 {
                write!(f, "{n}")?;
            } else {
                write!(f, "{n}^{e}")?;
            }
        }
        Ok(())
    }
}

/// Orders `X2` before `X10`.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    let split = |s: &str| {
        let cut = s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let (head, tail) = s.split_at(cut);
        (head.to_string(), tail.parse::<u64>().ok())
    };
    let (ha, na) = split(a);
    let (hb, nb) = split(b);
    ha.cmp(&hb).then(na.cmp(&nb)).then(a.cmp(b))
}

/// The non-intercept terms of a polynomial model. The intercept is always
/// implied.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    terms: Vec<Term>,
    max_exponent: u32,
}

impl TermSpec {
    pub fn custom(terms: Vec<Term>) -> Self {
        Self { terms, max_exponent: 2 }
    }

    pub fn linear(factors: &[&str]) -> Self {
        Self::custom(factors.iter().map(|f| Term::linear(f)).collect())
    }

    /// Linear terms, then pure quadratics, then two-factor interactions in
    /// lexicographic pair order.
    pub fn second_order(factors: &[&str]) -> Self {
        let mut terms: Vec<Term> = factors.iter().map(|f| Term::linear(f)).collect();
        terms.extend(factors.iter().map(|f| Term::power(f, 2)));
        terms.extend(pairs(factors));
        Self::custom(terms)
    }

    /// Linear terms and all two-factor interactions.
    pub fn linear_with_interactions(factors: &[&str]) -> Self {
        let mut terms: Vec<Term> = factors.iter().map(|f| Term::linear(f)).collect();
        terms.extend(pairs(factors));
        Self::custom(terms)
    }

    /// Allows exponents up to `e` (default 2).
    pub fn with_max_exponent(mut self, e: u32) -> Self {
        self.max_exponent = e;
        self
    }

    pub fn max_exponent(&self) -> u32 {
        self.max_exponent
    }

    pub fn without(mut self, drop: &[Term]) -> Self {
        self.terms.retain(|t| !drop.contains(t));
        self
    }

    pub fn with(mut self, extra: impl IntoIterator<Item = Term>) -> Self {
        self.terms.extend(extra);
        self
    }

    /// Every product of a term of `self` with a term of `other`.
    pub fn cross(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                terms.push(a.product(b));
            }
        }
        Self { terms, max_exponent: self.max_exponent.max(other.max_exponent) }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of non-intercept terms (p - 1).
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Names of the factors the terms mention, in first-use order.
    pub fn factors(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            for (n, _) in t.powers() {
                if !out.contains(n) {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.terms.iter().enumerate() {
            if t.powers().is_empty() {
                return Err(Error::Model("empty term".into()));
            }
            if t.max_exponent() > self.max_exponent {
                return Err(Error::Model(format!(
                    "term `{t}` exceeds the maximum exponent {}",
                    self.max_exponent
                )));
            }
            if self.terms[..i].contains(t) {
                return Err(Error::Model(format!("duplicate term `{t}`")));
            }
        }
        Ok(())
    }

    /// Resolves factor names against the columns of `names`.
    pub fn compile(&self, names: &[String]) -> Result<CompiledModel> {
        self.validate()?;
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mut cols = Vec::with_capacity(t.powers().len());
            for (n, e) in t.powers() {
                let j = names.iter().position(|x| x == n).ok_or_else(|| Error::UnknownFactor(n.clone()))?;
                cols.push((j, *e as i32));
            }
            terms.push(cols);
        }
        Ok(CompiledModel { terms, width: names.len() })
    }
}

fn pairs(factors: &[&str]) -> Vec<Term> {
    let mut out = Vec::new();
    for i in 0..factors.len() {
        for j in (i + 1)..factors.len() {
            out.push(Term::interaction(factors[i], factors[j]));
        }
    }
    out
}

/// A [`TermSpec`] bound to column positions, for fast row evaluation.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    terms: Vec<Vec<(usize, i32)>>,
    width: usize,
}

impl CompiledModel {
    /// Number of non-intercept columns.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Writes the non-intercept model row for one point.
    pub fn row_into(&self, levels: &[f64], out: &mut [f64]) {
        debug_assert_eq!(levels.len(), self.width);
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.iter().map(|&(j, e)| levels[j].powi(e)).product();
        }
    }

    /// Non-intercept model matrix.
    pub fn matrix(&self, points: &LevelTable) -> DenseMatrix {
        let mut x = DenseMatrix::zeros(points.nrows(), self.len());
        let mut buf = vec![0.0; self.len()];
        for (i, r) in points.rows().enumerate() {
            self.row_into(r, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        x
    }
}

/// Model matrix X_s with the intercept excluded.
#[derive(Debug, Clone)]
pub struct ModelMatrix {
    pub x: DenseMatrix,
}

impl ModelMatrix {
    /// Parameter count including the intercept.
    pub fn p(&self) -> usize {
        self.x.ncols() + 1
    }

    /// `[1 | X]`.
    pub fn with_intercept(&self) -> DenseMatrix {
        let mut out = DenseMatrix::from_element(self.x.nrows(), self.x.ncols() + 1, 1.0);
        out.columns_mut(1, self.x.ncols()).copy_from(&self.x);
        out
    }
}

pub fn build_model_matrix(points: &LevelTable, spec: &TermSpec) -> Result<ModelMatrix> {
    Ok(ModelMatrix { x: spec.compile(points.names())?.matrix(points) })
}

/// Key identifying a row of levels; `-0.0` and `0.0` coincide.
pub fn level_key(levels: &[f64]) -> Vec<u64> {
    levels.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect()
}

/// Assignment of units to distinct treatment combinations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentIndicator {
    /// Treatment index of every row, numbered by first appearance.
    pub groups: Vec<usize>,
    pub count: usize,
}

impl TreatmentIndicator {
    pub fn from_rows(points: &LevelTable) -> Self {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups = Vec::with_capacity(points.nrows());
        for r in points.rows() {
            let next = seen.len();
            groups.push(*seen.entry(level_key(r)).or_insert(next));
        }
        Self { groups, count: seen.len() }
    }

    /// m x t 0/1 matrix.
    pub fn matrix(&self) -> DenseMatrix {
        crate::structure::indicator(&self.groups, self.count)
    }
}

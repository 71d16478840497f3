//! Multi-stratum unit structures.
//!
//! A structure is written as a formula over named unit factors with sizes,
//! for example `(Ovens(10)*Batches(3))/Runs(2)`. `*` crosses two
//! sub-structures and `/` nests the right one inside every unit of the left
//! one. Both operators have equal precedence and associate to the left.
//!
//! Units are numbered lexicographically by factor level with the first
//! factor of the formula outermost. Strata are the factor sets generated by
//! the formula, closed under marginality, and ordered from coarse to fine.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitFactor {
    pub name: String,
    /// Number of levels within each unit of the factors it is nested in.
    pub size: usize,
    /// Unit factors this one is nested within.
    pub parents: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratum {
    /// Dot-joined factor names, or `Mean`.
    pub label: String,
    /// Indices of the constituent unit factors, in formula order.
    pub factors: Vec<usize>,
    pub units: usize,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expr {
    Factor(usize),
    Cross(Box<Expr>, Box<Expr>),
    Nest(Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone)]
pub struct UnitStructure {
    expr: Expr,
    factors: Vec<UnitFactor>,
    strata: Vec<Stratum>,
    strides: Vec<usize>,
    n: usize,
    mixed_without_parentheses: bool,
}

impl PartialEq for UnitStructure {
    fn eq(&self, other: &Self) -> bool {
        self.factors == other.factors && self.strata == other.strata
    }
}

impl UnitStructure {
    pub fn parse(formula: &str) -> Result<Self> {
        let tokens = tokenize(formula)?;
        let mut parser = Parser { tokens, at: 0, factors: Vec::new(), mixed: false };
        let expr = parser.expr()?;
        if let Some(tok) = parser.tokens.get(parser.at) {
            return Err(Error::Syntax {
                column: tok.column,
                message: format!("unexpected {}", tok.kind),
            });
        }
        let mixed = parser.mixed;
        let mut factors = parser.factors;
        assign_parents(&expr, &mut factors);
        Ok(Self::build(expr, factors, mixed))
    }

    fn build(expr: Expr, factors: Vec<UnitFactor>, mixed: bool) -> Self {
        let mut sets: Vec<BTreeSet<usize>> = generate(&expr).into_iter().collect();
        sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.iter().cmp(b.iter())));

        let mut strata: Vec<Stratum> = Vec::with_capacity(sets.len());
        for set in &sets {
            let idx: Vec<usize> = set.iter().copied().collect();
            let units = idx.iter().map(|&f| factors[f].size).product::<usize>();
            let label = if idx.is_empty() {
                "Mean".to_string()
            } else {
                idx.iter().map(|&f| factors[f].name.as_str()).collect::<Vec<_>>().join(".")
            };
            // Hasse rule: a stratum's df is its unit count less the df of
            // every coarser stratum it contains.
            let coarser: usize = strata
                .iter()
                .filter(|s| s.factors.len() < idx.len() && is_subset(&s.factors, &idx))
                .map(|s| s.df)
                .sum();
            strata.push(Stratum { label, factors: idx, units, df: units - coarser });
        }

        let mut strides = vec![1; factors.len()];
        for f in (0..factors.len().saturating_sub(1)).rev() {
            strides[f] = strides[f + 1] * factors[f + 1].size;
        }
        let n = factors.iter().map(|f| f.size).product();
        Self { expr, factors, strata, strides, n, mixed_without_parentheses: mixed }
    }

    /// Total number of units.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn factors(&self) -> &[UnitFactor] {
        &self.factors
    }

    /// Strata in canonical coarse-to-fine order, starting with `Mean`.
    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    /// True when the formula mixes `*` and `/` at one level without
    /// parentheses, which is legal but easy to misread.
    pub fn has_mixed_operators(&self) -> bool {
        self.mixed_without_parentheses
    }

    /// Index of the finest stratum (the individual units).
    pub fn bottom(&self) -> usize {
        self.strata.len() - 1
    }

    /// Index of the stratum with the given label. Factor names may appear in
    /// any order, separated by `.`, `*` or `:`.
    pub fn stratum_index(&self, label: &str) -> Result<usize> {
        let label = label.trim();
        if label.eq_ignore_ascii_case("mean") {
            return Ok(0);
        }
        let mut want = BTreeSet::new();
        for name in label.split(['.', '*', ':']).map(str::trim) {
            let f = self
                .factors
                .iter()
                .position(|u| u.name == name)
                .ok_or_else(|| Error::UnknownStratum(label.to_string()))?;
            want.insert(f);
        }
        self.strata
            .iter()
            .position(|s| s.factors.iter().copied().collect::<BTreeSet<_>>() == want)
            .ok_or_else(|| Error::UnknownStratum(label.to_string()))
    }

    /// Level (0-based) of unit factor `f` on unit `unit`.
    pub fn level(&self, unit: usize, f: usize) -> usize {
        (unit / self.strides[f]) % self.factors[f].size
    }

    /// For every unit, the index of the stratum-`s` unit containing it.
    /// Stratum-`s` units are numbered lexicographically in formula order.
    pub fn unit_labels(&self, s: usize) -> Vec<usize> {
        let factors = &self.strata[s].factors;
        (0..self.n)
            .map(|u| factors.iter().fold(0, |acc, &f| acc * self.factors[f].size + self.level(u, f)))
            .collect()
    }

    /// True when every factor of stratum `coarse` is a factor of `fine`.
    pub fn is_coarser_or_equal(&self, coarse: usize, fine: usize) -> bool {
        is_subset(&self.strata[coarse].factors, &self.strata[fine].factors)
    }

    /// Strata strictly coarser than `s`, excluding `Mean`.
    pub fn coarser_strata(&self, s: usize) -> Vec<usize> {
        (1..self.strata.len())
            .filter(|&w| w != s && self.is_coarser_or_equal(w, s))
            .collect()
    }

    /// Map from stratum-`fine` unit index to the stratum-`coarse` unit that
    /// contains it.
    pub fn coarsen(&self, fine: usize, coarse: usize) -> Result<Vec<usize>> {
        if !self.is_coarser_or_equal(coarse, fine) {
            return Err(Error::Dimension(format!(
                "stratum {} is not coarser than {}",
                self.strata[coarse].label, self.strata[fine].label
            )));
        }
        let lf = self.unit_labels(fine);
        let lc = self.unit_labels(coarse);
        let mut map = vec![0; self.strata[fine].units];
        for (a, b) in lf.into_iter().zip(lc) {
            map[a] = b;
        }
        Ok(map)
    }

    /// Indicator matrix (n x u_s) of stratum `s`.
    pub fn unit_indicator(&self, s: usize) -> DenseMatrix {
        indicator(&self.unit_labels(s), self.strata[s].units)
    }

    /// Orthogonal projector onto stratum `s`: the projector onto its
    /// indicator's column space less those of every coarser stratum.
    pub fn stratum_projectors(&self) -> Vec<DenseMatrix> {
        let n = self.n;
        let mut out: Vec<DenseMatrix> = Vec::with_capacity(self.strata.len());
        for (s, stratum) in self.strata.iter().enumerate() {
            let labels = self.unit_labels(s);
            let w = stratum.units as f64 / n as f64;
            let mut a = DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { w } else { 0.0 });
            for (v, prev) in out.iter().enumerate() {
                if self.strata[v].factors.len() < stratum.factors.len() && self.is_coarser_or_equal(v, s) {
                    a -= prev;
                }
            }
            out.push(symmetrize(&a));
        }
        out
    }

    /// Degrees of freedom of every stratum as the rounded trace of its
    /// projector.
    pub fn projector_df(&self) -> Vec<usize> {
        self.stratum_projectors().iter().map(|p| p.trace().round() as usize).collect()
    }

    /// Canonical formula; parses back to an identical structure.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_expr(&self.expr, &mut s);
        s
    }

    fn render_expr(&self, e: &Expr, out: &mut String) {
        match e {
            Expr::Factor(f) => {
                let u = &self.factors[*f];
                out.push_str(&format!("{}({})", u.name, u.size));
            }
            Expr::Cross(a, b) | Expr::Nest(a, b) => {
                let op = if matches!(e, Expr::Cross(..)) { '*' } else { '/' };
                let same = |x: &Expr| match x {
                    Expr::Factor(_) => true,
                    Expr::Cross(..) => op == '*',
                    Expr::Nest(..) => op == '/',
                };
                self.render_operand(a, same(a), out);
                out.push(op);
                self.render_operand(b, matches!(**b, Expr::Factor(_)), out);
            }
        }
    }

    fn render_operand(&self, e: &Expr, bare: bool, out: &mut String) {
        if bare {
            self.render_expr(e, out);
        } else {
            out.push('(');
            self.render_expr(e, out);
            out.push(')');
        }
    }
}

impl fmt::Display for UnitStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// n x k 0/1 matrix with a one in column `labels[i]` of row `i`.
pub fn indicator(labels: &[usize], k: usize) -> DenseMatrix {
    let mut z = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        z[(i, l)] = 1.0;
    }
    z
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

fn all_factors(e: &Expr) -> BTreeSet<usize> {
    match e {
        Expr::Factor(f) => BTreeSet::from([*f]),
        Expr::Cross(a, b) | Expr::Nest(a, b) => {
            let mut s = all_factors(a);
            s.extend(all_factors(b));
            s
        }
    }
}

fn generate(e: &Expr) -> BTreeSet<BTreeSet<usize>> {
    match e {
        Expr::Factor(f) => BTreeSet::from([BTreeSet::new(), BTreeSet::from([*f])]),
        Expr::Cross(a, b) => {
            let (sa, sb) = (generate(a), generate(b));
            let mut out = BTreeSet::new();
            for x in &sa {
                for y in &sb {
                    out.insert(x.union(y).copied().collect());
                }
            }
            out
        }
        Expr::Nest(a, b) => {
            let outer = all_factors(a);
            let mut out = generate(a);
            for y in generate(b) {
                if !y.is_empty() {
                    out.insert(outer.union(&y).copied().collect());
                }
            }
            out
        }
    }
}

fn assign_parents(e: &Expr, factors: &mut [UnitFactor]) {
    match e {
        Expr::Factor(_) => {}
        Expr::Cross(a, b) => {
            assign_parents(a, factors);
            assign_parents(b, factors);
        }
        Expr::Nest(a, b) => {
            assign_parents(a, factors);
            assign_parents(b, factors);
            let outer = all_factors(a);
            for f in all_factors(b) {
                factors[f].parents.extend(outer.iter().copied());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Name(String),
    Int(usize),
    Open,
    Close,
    Star,
    Slash,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Name(n) => write!(f, "name `{n}`"),
            Kind::Int(i) => write!(f, "integer {i}"),
            Kind::Open => f.write_str("`(`"),
            Kind::Close => f.write_str("`)`"),
            Kind::Star => f.write_str("`*`"),
            Kind::Slash => f.write_str("`/`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    column: usize,
}

fn tokenize(s: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let kind = match c {
            '(' => Kind::Open,
            ')' => Kind::Close,
            '*' => Kind::Star,
            '/' => Kind::Slash,
            c if c.is_ascii_digit() => {
                let start = i;
                while i + 1 < chars.len() && chars[i + 1].is_ascii_digit() {
                    i += 1;
                }
                let text: String = chars[start..=i].iter().collect();
                let v = text.parse().map_err(|_| Error::Syntax {
                    column,
                    message: format!("integer `{text}` is too large"),
                })?;
                Kind::Int(v)
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i + 1 < chars.len() && (chars[i + 1].is_alphanumeric() || chars[i + 1] == '_') {
                    i += 1;
                }
                Kind::Name(chars[start..=i].iter().collect())
            }
            other => {
                return Err(Error::Syntax { column, message: format!("unexpected character `{other}`") })
            }
        };
        out.push(Token { kind, column });
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    factors: Vec<UnitFactor>,
    mixed: bool,
}

impl Parser {
    fn peek(&self) -> Option<&Kind> {
        self.tokens.get(self.at).map(|t| &t.kind)
    }

    fn column(&self) -> usize {
        self.tokens
            .get(self.at)
            .map(|t| t.column)
            .unwrap_or_else(|| self.tokens.last().map_or(1, |t| t.column + 1))
    }

    fn fail<T>(&self, expected: &str) -> Result<T> {
        let found = self.peek().map_or("end of input".to_string(), |k| k.to_string());
        Err(Error::Syntax { column: self.column(), message: format!("expected {expected}, found {found}") })
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        let mut seen: Option<Kind> = None;
        while let Some(op) = self.peek().cloned() {
            if op != Kind::Star && op != Kind::Slash {
                break;
            }
            if seen.as_ref().is_some_and(|s| *s != op) {
                self.mixed = true;
            }
            seen = Some(op.clone());
            self.at += 1;
            let rhs = self.term()?;
            lhs = if op == Kind::Star {
                Expr::Cross(Box::new(lhs), Box::new(rhs))
            } else {
                Expr::Nest(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Kind::Open) => {
                self.at += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Kind::Close) {
                    return self.fail("`)`");
                }
                self.at += 1;
                Ok(e)
            }
            Some(Kind::Name(name)) => {
                self.at += 1;
                if self.peek() != Some(&Kind::Open) {
                    return self.fail("`(` after a factor name");
                }
                self.at += 1;
                let size = match self.peek() {
                    Some(Kind::Int(v)) => *v,
                    _ => return self.fail("a factor size"),
                };
                self.at += 1;
                if self.peek() != Some(&Kind::Close) {
                    return self.fail("`)`");
                }
                self.at += 1;
                if self.factors.iter().any(|f| f.name == name) {
                    return Err(Error::DuplicateFactor(name));
                }
                if size < 2 {
                    return Err(Error::FactorSize { name, size });
                }
                self.factors.push(UnitFactor { name, size, parents: BTreeSet::new() });
                Ok(Expr::Factor(self.factors.len() - 1))
            }
            _ => self.fail("a factor or `(`"),
        }
    }
}

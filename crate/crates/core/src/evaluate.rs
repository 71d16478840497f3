//! Evaluation of completed designs: information under the mixed model,
//! relative efficiencies over grids of variance ratios, and skeleton
//! analyses of variance.

use std::fmt;

use rayon::prelude::*;

use crate::criteria::{pure_error_df, BlockingScheme, Blocks, WeightMatrix};
use crate::error::{Error, Result};
use crate::linalg::{self, hstack, DenseMatrix};
use crate::model::{build_model_matrix, LevelTable, TermSpec, TreatmentIndicator};
use crate::structure::UnitStructure;

/// Variance ratios of the random strata and the covariance shape
/// `V = I + sum_s eta_s Z_s Z_s'` they induce.
#[derive(Debug, Clone)]
pub struct MixedModelContext {
    eta: Vec<(usize, f64)>,
    v: DenseMatrix,
}

impl MixedModelContext {
    /// `eta` pairs stratum labels with ratios; random strata not listed get
    /// ratio zero.
    pub fn new(structure: &UnitStructure, eta: &[(String, f64)]) -> Result<Self> {
        let n = structure.n();
        let mut v = DenseMatrix::identity(n, n);
        let mut resolved = Vec::new();
        for (label, e) in eta {
            let s = structure.stratum_index(label)?;
            if s == 0 || s == structure.bottom() {
                return Err(Error::Config(format!("`{label}` is not a random blocking stratum")));
            }
            if !(e.is_finite() && *e >= 0.0) {
                return Err(Error::Config(format!("variance ratio for `{label}` must be finite and nonnegative")));
            }
            let labels = structure.unit_labels(s);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == labels[j] {
                        v[(i, j)] += e;
                    }
                }
            }
            resolved.push((s, *e));
        }
        Ok(Self { eta: resolved, v })
    }

    /// Ratios in the order of [`random_strata`].
    pub fn from_values(structure: &UnitStructure, values: &[f64]) -> Result<Self> {
        let labels = random_strata(structure);
        if labels.len() != values.len() {
            return Err(Error::Config(format!("{} variance ratios for {} random strata", values.len(), labels.len())));
        }
        let pairs: Vec<(String, f64)> = labels.into_iter().zip(values.iter().copied()).collect();
        Self::new(structure, &pairs)
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn eta(&self) -> &[(usize, f64)] {
        &self.eta
    }
}

/// Labels of the strata strictly between the mean and the units.
pub fn random_strata(structure: &UnitStructure) -> Vec<String> {
    let s = structure.strata();
    s[1..s.len() - 1].iter().map(|s| s.label.clone()).collect()
}

/// `M = X'V^-1 X` over all units, intercept included.
pub fn information_matrix(
    design: &LevelTable,
    spec: &TermSpec,
    structure: &UnitStructure,
    ctx: &MixedModelContext,
) -> Result<DenseMatrix> {
    if design.nrows() != structure.n() {
        return Err(Error::Dimension(format!("design has {} rows, structure {} units", design.nrows(), structure.n())));
    }
    let x = build_model_matrix(design, spec)?.with_intercept();
    let chol = linalg::cholesky(ctx.v()).ok_or_else(|| Error::Dimension("V is not positive definite".into()))?;
    let vix = chol.solve(&x);
    Ok(linalg::symmetrize(&(x.transpose() * vix)))
}

/// Information about the non-intercept parameters: the Schur complement of
/// the intercept block of `m`.
pub fn reduced_information(m: &DenseMatrix) -> DenseMatrix {
    let k = m.nrows() - 1;
    let m00 = m[(0, 0)];
    let m0: Vec<f64> = (1..=k).map(|j| m[(0, j)]).collect();
    DenseMatrix::from_fn(k, k, |i, j| m[(i + 1, j + 1)] - m0[i] * m0[j] / m00)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EfficiencyKind {
    D,
    A,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub percent: f64,
    /// One of the reduced information matrices was singular; `percent` is 0.
    pub singular: bool,
}

/// Efficiency of design `a` relative to `b` in percent.
pub fn relative_efficiency(
    a: &LevelTable,
    b: &LevelTable,
    spec: &TermSpec,
    structure: &UnitStructure,
    ctx: &MixedModelContext,
    kind: EfficiencyKind,
    w: &WeightMatrix,
) -> Result<Efficiency> {
    let ma = reduced_information(&information_matrix(a, spec, structure, ctx)?);
    let mb = reduced_information(&information_matrix(b, spec, structure, ctx)?);
    efficiency_from_information(&ma, &mb, spec, kind, w)
}

fn efficiency_from_information(
    ma: &DenseMatrix,
    mb: &DenseMatrix,
    spec: &TermSpec,
    kind: EfficiencyKind,
    w: &WeightMatrix,
) -> Result<Efficiency> {
    let singular = Efficiency { percent: 0.0, singular: true };
    Ok(match kind {
        EfficiencyKind::D => match (linalg::log_det_spd(ma), linalg::log_det_spd(mb)) {
            (Some(la), Some(lb)) => Efficiency {
                percent: 100.0 * ((la - lb) / ma.nrows() as f64).exp(),
                singular: false,
            },
            _ => singular,
        },
        EfficiencyKind::A => {
            let wv = w.resolve(spec)?;
            match (linalg::inverse_spd(ma), linalg::inverse_spd(mb)) {
                (Some(ia), Some(ib)) => Efficiency {
                    percent: 100.0 * linalg::weighted_trace(&wv, &ib) / linalg::weighted_trace(&wv, &ia),
                    singular: false,
                },
                _ => singular,
            }
        }
    })
}

/// Parses a grid of variance ratios over the random strata.
///
/// * `1,10,100` gives every random stratum the values 1, 10 and 100;
/// * `Days=1,10;Times=1,100` lists values per stratum;
/// * `1:1:1;100:1:1` lists explicit points, one value per random stratum.
///
/// Cartesian grids vary the first random stratum fastest. An empty string
/// means `1,10,100`.
pub fn parse_eta_grid(spec: &str, structure: &UnitStructure) -> Result<Vec<Vec<f64>>> {
    let strata = random_strata(structure);
    let spec = spec.trim();
    let spec = if spec.is_empty() { "1,10,100" } else { spec };
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| Error::Config(format!("bad variance ratio `{s}`")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Config(format!("variance ratio `{s}` must be finite and nonnegative")));
        }
        Ok(v)
    };
    let list = |s: &str| -> Result<Vec<f64>> { s.split(',').map(num).collect() };
    if spec.contains(':') {
        return spec
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                let v: Vec<f64> = p.split(':').map(num).collect::<Result<_>>()?;
                if v.len() != strata.len() {
                    return Err(Error::Config(format!("point `{p}` has {} values for {} random strata", v.len(), strata.len())));
                }
                Ok(v)
            })
            .collect();
    }
    let axes: Vec<Vec<f64>> = if spec.contains('=') {
        let mut axes = vec![None; strata.len()];
        for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
            let (name, values) =
                part.split_once('=').ok_or_else(|| Error::Config(format!("expected `stratum=values` in `{part}`")))?;
            let s = structure.stratum_index(name)?;
            let label = &structure.strata()[s].label;
            let at = strata
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Config(format!("`{name}` is not a random blocking stratum")))?;
            axes[at] = Some(list(values)?);
        }
        axes.into_iter()
            .zip(&strata)
            .map(|(a, l)| a.ok_or_else(|| Error::Config(format!("no variance ratios for `{l}`"))))
            .collect::<Result<_>>()?
    } else {
        vec![list(spec)?; strata.len()]
    };
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for axis in &axes {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for v in axis {
            for p in &points {
                let mut p = p.clone();
                p.push(*v);
                next.push(p);
            }
        }
        points = next;
    }
    // Built with the last stratum fastest; reorder so the first is fastest.
    let mut keyed: Vec<(Vec<usize>, Vec<f64>)> = points
        .into_iter()
        .map(|p| {
            let key = p
                .iter()
                .zip(&axes)
                .rev()
                .map(|(v, axis)| axis.iter().position(|a| a == v).unwrap_or(0))
                .collect();
            (key, p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRow {
    pub eta: Vec<f64>,
    /// One entry per compared design.
    pub d: Vec<Efficiency>,
    pub a: Vec<Efficiency>,
}

/// D and A efficiencies of every design relative to `reference` at every
/// grid point.
pub fn efficiency_table(
    designs: &[&LevelTable],
    reference: &LevelTable,
    spec: &TermSpec,
    structure: &UnitStructure,
    grid: &[Vec<f64>],
    w: &WeightMatrix,
) -> Result<Vec<EfficiencyRow>> {
    grid.par_iter()
        .map(|eta| {
            let ctx = MixedModelContext::from_values(structure, eta)?;
            let mb = reduced_information(&information_matrix(reference, spec, structure, &ctx)?);
            let mut d = Vec::with_capacity(designs.len());
            let mut a = Vec::with_capacity(designs.len());
            for des in designs {
                let ma = reduced_information(&information_matrix(des, spec, structure, &ctx)?);
                d.push(efficiency_from_information(&ma, &mb, spec, EfficiencyKind::D, w)?);
                a.push(efficiency_from_information(&ma, &mb, spec, EfficiencyKind::A, w)?);
            }
            Ok(EfficiencyRow { eta: eta.clone(), d, a })
        })
        .collect()
}

/// Treatment factors applied up to one stratum, and the model fitted to
/// them there.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSet {
    pub label: String,
    /// All treatment factors applied at this stratum or above.
    pub factors: Vec<String>,
    pub model: TermSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnovaRow {
    pub stratum: String,
    pub source: String,
    pub df: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonAnova {
    pub rows: Vec<AnovaRow>,
}

impl SkeletonAnova {
    /// df of a source, zero when absent. Sources are `T<k>`, `T<k>:model`,
    /// `T<k>:lof`, `PE` and `Total`.
    pub fn df(&self, stratum: &str, source: &str) -> i64 {
        self.rows
            .iter()
            .find(|r| r.stratum == stratum && r.source == source)
            .map_or(0, |r| r.df)
    }

    pub fn strata(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.stratum.as_str()) {
                out.push(&r.stratum);
            }
        }
        out
    }
}

impl fmt::Display for SkeletonAnova {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:<14} {:>5}", "stratum", "source", "df")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:<14} {:>5}", r.stratum, r.source, r.df)?;
        }
        Ok(())
    }
}

/// Skeleton analysis of variance of a complete design.
///
/// Strata are processed from the units upwards. With `L` the sum of the
/// projectors already processed and `K = L + S_t`, the information a
/// column set `M` first gains in stratum `t` has dimension
/// `rank(K M) - rank(L M)`. Treatment set `T_j` contributes the gain of
/// `[T_1..T_j]` over `[T_1..T_j-1]`; its model part is the gain of
/// `[T_1..T_j-1, X_j]` over the same base. Pure error is what remains of the
/// stratum's df.
pub fn skeleton_anova(design: &LevelTable, structure: &UnitStructure, sets: &[TreatmentSet]) -> Result<SkeletonAnova> {
    let n = structure.n();
    if design.nrows() != n {
        return Err(Error::Dimension(format!("design has {} rows, structure {} units", design.nrows(), n)));
    }
    let mut tmats = Vec::with_capacity(sets.len());
    let mut xmats = Vec::with_capacity(sets.len());
    for s in sets {
        let pts = design.select(&s.factors)?;
        tmats.push(TreatmentIndicator::from_rows(&pts).matrix());
        xmats.push(build_model_matrix(&pts, &s.model)?.x);
    }
    let cumulative: Vec<DenseMatrix> = (0..=sets.len())
        .map(|j| if j == 0 { DenseMatrix::zeros(n, 0) } else { hstack(&tmats[..j].iter().collect::<Vec<_>>()) })
        .collect();
    let projectors = structure.stratum_projectors();
    let gain = |k: &DenseMatrix, l: &DenseMatrix, m: &DenseMatrix| -> Result<i64> {
        if m.ncols() == 0 {
            return Ok(0);
        }
        let scale = linalg::max_column_norm(m);
        Ok(linalg::rank_against(&(k * m), scale)? as i64 - linalg::rank_against(&(l * m), scale)? as i64)
    };

    let mut per_stratum: Vec<Vec<AnovaRow>> = vec![Vec::new(); structure.strata().len()];
    let mut l = DenseMatrix::zeros(n, n);
    for t in (1..structure.strata().len()).rev() {
        let stratum = &structure.strata()[t];
        let k = &l + &projectors[t];
        let mut rows = Vec::new();
        let mut used = 0;
        for (j, set) in sets.iter().enumerate() {
            let base = gain(&k, &l, &cumulative[j])?;
            let contribution = gain(&k, &l, &cumulative[j + 1])? - base;
            let with_model = hstack(&[&cumulative[j], &xmats[j]]);
            let model = gain(&k, &l, &with_model)? - base;
            if contribution == 0 && model == 0 {
                continue;
            }
            used += contribution;
            rows.push(AnovaRow { stratum: stratum.label.clone(), source: set.label.clone(), df: contribution });
            rows.push(AnovaRow { stratum: stratum.label.clone(), source: format!("{}:model", set.label), df: model });
            rows.push(AnovaRow {
                stratum: stratum.label.clone(),
                source: format!("{}:lof", set.label),
                df: contribution - model,
            });
        }
        rows.push(AnovaRow { stratum: stratum.label.clone(), source: "PE".into(), df: stratum.df as i64 - used });
        rows.push(AnovaRow { stratum: stratum.label.clone(), source: "Total".into(), df: stratum.df as i64 });
        per_stratum[t] = rows;
        l = k;
    }
    let mut rows: Vec<AnovaRow> = per_stratum.into_iter().flatten().collect();
    rows.push(AnovaRow { stratum: "Total".into(), source: "Total".into(), df: n as i64 - 1 });
    Ok(SkeletonAnova { rows })
}

/// Pure-error df of stratum `t` as a difference of two pure-error counts:
/// blocking by every stratum before `t` in canonical order, and by every
/// stratum up to and including `t`, always with the complete treatment
/// indicator of `factors`.
pub fn stratum_pure_error(
    design: &LevelTable,
    structure: &UnitStructure,
    factors: &[String],
    t: usize,
) -> Result<usize> {
    let treat = TreatmentIndicator::from_rows(&design.select(factors)?);
    let count = |upto: usize| -> Result<usize> {
        let mut blocks: Vec<Blocks> = (1..upto).map(|s| Blocks::new(structure.unit_labels(s))).collect();
        let scheme = match blocks.len() {
            0 => BlockingScheme::crd(structure.n()),
            1 => BlockingScheme::Blocked(blocks.remove(0)),
            _ => BlockingScheme::Crossed(blocks),
        };
        pure_error_df(&scheme, &treat)
    };
    Ok(count(t)? - count(t + 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(names: &[&str], rows: &[Vec<f64>]) -> LevelTable {
        LevelTable::new(names.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn zero_ratios_give_ordinary_information() {
        let s = UnitStructure::parse("B(2)/U(2)").unwrap();
        let d = design(&["A"], &[vec![-1.0], vec![1.0], vec![-1.0], vec![1.0]]);
        let ctx = MixedModelContext::new(&s, &[("B".into(), 0.0)]).unwrap();
        let m = information_matrix(&d, &TermSpec::linear(&["A"]), &s, &ctx).unwrap();
        assert_eq!(m, DenseMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 4.0]));
    }

    #[test]
    fn self_efficiency_is_one_hundred() {
        let s = UnitStructure::parse("B(3)*C(2)").unwrap();
        let d = design(&["A"], &[vec![-1.0], vec![1.0], vec![0.0], vec![1.0], vec![1.0], vec![-1.0]]);
        let ctx = MixedModelContext::from_values(&s, &[10.0, 1.0]).unwrap();
        let spec = TermSpec::second_order(&["A"]);
        for kind in [EfficiencyKind::D, EfficiencyKind::A] {
            let e = relative_efficiency(&d, &d, &spec, &s, &ctx, kind, &WeightMatrix::Identity).unwrap();
            assert!((e.percent - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn whole_plot_factor_variance_grows_with_ratio() {
        let s = UnitStructure::parse("B(4)/U(2)").unwrap();
        let rows: Vec<Vec<f64>> = (0..8).map(|u| vec![if u / 2 % 2 == 0 { -1.0 } else { 1.0 }, if u % 2 == 0 { -1.0 } else { 1.0 }]).collect();
        let d = design(&["W", "S"], &rows);
        let spec = TermSpec::linear(&["W", "S"]);
        let mut last = 0.0;
        for eta in [1.0, 1e2, 1e4] {
            let ctx = MixedModelContext::from_values(&s, &[eta]).unwrap();
            let m = information_matrix(&d, &spec, &s, &ctx).unwrap();
            let inv = linalg::inverse_spd(&m).unwrap();
            assert!(inv[(1, 1)] > last * 10.0);
            last = inv[(1, 1)];
        }
    }

    #[test]
    fn eta_grids() {
        let s = UnitStructure::parse("Days(7)*Times(4)").unwrap();
        let g = parse_eta_grid("", &s).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], [1.0, 1.0]);
        assert_eq!(g[1], [10.0, 1.0]);
        assert_eq!(g[3], [1.0, 10.0]);
        let g = parse_eta_grid("Times=5;Days=1,2", &s).unwrap();
        assert_eq!(g, [vec![1.0, 5.0], vec![2.0, 5.0]]);
        let g = parse_eta_grid("1:2;3:4", &s).unwrap();
        assert_eq!(g, [vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert!(parse_eta_grid("1:2:3", &s).is_err());
        assert!(parse_eta_grid("Days=1", &s).is_err());
    }

    #[test]
    fn replicated_single_treatment_has_pure_error() {
        let s = UnitStructure::parse("U(5)").unwrap();
        let d = design(&["A"], &vec![vec![1.0]; 5]);
        let sets = [TreatmentSet { label: "T1".into(), factors: vec!["A".into()], model: TermSpec::custom(vec![]) }];
        let a = skeleton_anova(&d, &s, &sets).unwrap();
        assert_eq!(a.df("U", "PE"), 4);
        assert_eq!(a.df("U", "Total"), 4);
        assert_eq!(a.df("Total", "Total"), 4);
    }

    #[test]
    fn anova_sources_sum_to_totals() {
        let s = UnitStructure::parse("B(3)/U(4)").unwrap();
        let rows: Vec<Vec<f64>> = (0..12).map(|u| vec![(u / 4) as f64 - 1.0, ((u % 4) % 3) as f64 - 1.0]).collect();
        let d = design(&["W", "S"], &rows);
        let sets = [
            TreatmentSet { label: "T1".into(), factors: vec!["W".into()], model: TermSpec::second_order(&["W"]) },
            TreatmentSet {
                label: "T2".into(),
                factors: vec!["W".into(), "S".into()],
                model: TermSpec::second_order(&["W", "S"]).without(&[crate::model::Term::linear("W"), crate::model::Term::power("W", 2)]),
            },
        ];
        let a = skeleton_anova(&d, &s, &sets).unwrap();
        for st in ["B", "B.U"] {
            let parts: i64 = a
                .rows
                .iter()
                .filter(|r| r.stratum == st && (r.source != "Total" && !r.source.contains(':')))
                .map(|r| r.df)
                .sum();
            assert_eq!(parts, a.df(st, "Total"));
        }
        assert_eq!(a.df("B", "T1"), 2);
        for t in 1..=2 {
            let via_counts = stratum_pure_error(&d, &s, &["W".into(), "S".into()], t).unwrap() as i64;
            assert_eq!(via_counts, a.df(&s.strata()[t].label, "PE"));
        }
    }
}

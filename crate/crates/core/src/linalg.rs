//! Dense linear algebra used throughout the crate: rank, column-space
//! projectors and log-determinants.
//!
//! Rank comes from a Householder QR with column pivoting (Businger-Golub),
//! where the pivot is the trailing column of largest Euclidean norm. The
//! magnitudes of the diagonal of R are then non-increasing and their ratio to
//! the first one is compared against a relative tolerance.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Relative tolerance used for every rank decision in the crate.
pub const RANK_TOL: f64 = 1e-8;

/// Width, in orders of magnitude either side of the tolerance, of the band in
/// which [`rank_checked`] refuses to decide.
const AMBIGUITY_BAND: f64 = 1e2;

#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Householder vectors below the diagonal, R on and above it.
    factors: DenseMatrix,
    /// Leading entries of the Householder vectors' scaling, one per reflector.
    betas: Vec<f64>,
    perm: Vec<usize>,
}

impl PivotedQr {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::EmptyMatrix);
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let (m, n) = a.shape();
        let mut f = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let k = m.min(n);
        let mut betas = Vec::with_capacity(k);
        let mut norms: Vec<f64> = (0..n).map(|j| f.column(j).norm_squared()).collect();

        for j in 0..k {
            // Recompute trailing norms exactly; downdating loses accuracy on
            // the 0/1 indicator matrices this crate works with.
            for (c, norm) in norms.iter_mut().enumerate().skip(j) {
                *norm = f.view((j, c), (m - j, 1)).norm_squared();
            }
            let (pivot, &best) = norms
                .iter()
                .enumerate()
                .skip(j)
                .max_by(|x, y| x.1.total_cmp(y.1).then(y.0.cmp(&x.0)))
                .expect("non-empty trailing block");
            if pivot != j {
                f.swap_columns(j, pivot);
                norms.swap(j, pivot);
                perm.swap(j, pivot);
            }
            if best == 0.0 {
                betas.push(0.0);
                continue;
            }
            let norm = best.sqrt();
            let x0 = f[(j, j)];
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            // v = x - alpha e1, stored in place with v[0] kept separately.
            let v0 = x0 - alpha;
            f[(j, j)] = v0;
            let vtv = v0 * v0 + (best - x0 * x0);
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for c in (j + 1)..n {
                let mut s = 0.0;
                for r in j..m {
                    s += f[(r, j)] * f[(r, c)];
                }
                s *= beta;
                if s != 0.0 {
                    for r in j..m {
                        let vr = f[(r, j)];
                        f[(r, c)] -= s * vr;
                    }
                }
            }
            // Store the diagonal of R; keep v[0] in betas' companion slot by
            // rescaling v so that v[0] = 1.
            if v0 != 0.0 {
                for r in (j + 1)..m {
                    f[(r, j)] /= v0;
                }
                betas.push(beta * v0 * v0);
            } else {
                betas.push(0.0);
            }
            f[(j, j)] = alpha;
        }
        Ok(Self { factors: f, betas, perm })
    }

    /// Absolute values of the diagonal of R, non-increasing.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.betas.len()).map(|i| self.factors[(i, i)].abs()).collect()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn rank(&self, tol: f64) -> usize {
        let p = self.pivots();
        let lead = p.first().copied().unwrap_or(0.0);
        if lead == 0.0 {
            return 0;
        }
        p.iter().take_while(|&&d| d > tol * lead).count()
    }

    /// First `r` columns of the orthogonal factor.
    pub fn q_columns(&self, r: usize) -> DenseMatrix {
        let m = self.factors.nrows();
        let mut q = DenseMatrix::zeros(m, r);
        for i in 0..r {
            q[(i, i)] = 1.0;
        }
        for j in (0..r.min(self.betas.len())).rev() {
            let beta = self.betas[j];
            if beta == 0.0 {
                continue;
            }
            for c in 0..r {
                let mut s = q[(j, c)];
                for row in (j + 1)..m {
                    s += self.factors[(row, j)] * q[(row, c)];
                }
                s *= beta;
                if s != 0.0 {
                    q[(j, c)] -= s;
                    for row in (j + 1)..m {
                        q[(row, c)] -= s * self.factors[(row, j)];
                    }
                }
            }
        }
        q
    }
}

pub fn rank(a: &DenseMatrix) -> Result<usize> {
    Ok(PivotedQr::new(a)?.rank(RANK_TOL))
}

/// Rank that fails with [`Error::AmbiguousRank`] when a pivot ratio falls
/// within two orders of magnitude of the tolerance.
pub fn rank_checked(a: &DenseMatrix, tol: f64) -> Result<usize> {
    let qr = PivotedQr::new(a)?;
    let p = qr.pivots();
    let lead = p.first().copied().unwrap_or(0.0);
    if lead == 0.0 {
        return Ok(0);
    }
    for &d in &p[1..] {
        let ratio = d / lead;
        if ratio > tol / AMBIGUITY_BAND && ratio < tol * AMBIGUITY_BAND {
            return Err(Error::AmbiguousRank { ratio, tol });
        }
    }
    Ok(qr.rank(tol))
}

/// Rank measured against an external `scale` rather than the leading pivot,
/// for products like `P M` whose size is bounded by that of `M`.
pub fn rank_against(a: &DenseMatrix, scale: f64) -> Result<usize> {
    if a.ncols() == 0 || a.nrows() == 0 || scale == 0.0 {
        return Ok(0);
    }
    let p = PivotedQr::new(a)?.pivots();
    for &d in &p {
        let ratio = d / scale;
        if ratio > RANK_TOL / AMBIGUITY_BAND && ratio < RANK_TOL * AMBIGUITY_BAND {
            return Err(Error::AmbiguousRank { ratio, tol: RANK_TOL });
        }
    }
    Ok(p.iter().filter(|&&d| d > RANK_TOL * scale).count())
}

/// Largest column norm.
pub fn max_column_norm(a: &DenseMatrix) -> f64 {
    a.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Rank of a matrix that may have zero columns.
pub fn rank_or_zero(a: &DenseMatrix) -> Result<usize> {
    if a.ncols() == 0 || a.nrows() == 0 {
        return Ok(0);
    }
    rank_checked(a, RANK_TOL)
}

/// Orthogonal projector onto the column space of `a`.
pub fn projector(a: &DenseMatrix) -> Result<DenseMatrix> {
    let m = a.nrows();
    if a.ncols() == 0 {
        return Ok(DenseMatrix::zeros(m, m));
    }
    let qr = PivotedQr::new(a)?;
    let r = qr.rank(RANK_TOL);
    let q = qr.q_columns(r);
    Ok(symmetrize(&(&q * q.transpose())))
}

/// I minus the projector onto the column space of `a`.
pub fn residual_projector(a: &DenseMatrix) -> Result<DenseMatrix> {
    let p = projector(a)?;
    Ok(DenseMatrix::identity(a.nrows(), a.nrows()) - p)
}

pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

pub fn hstack(blocks: &[&DenseMatrix]) -> DenseMatrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row counts differ");
        out.view_mut((0, at), (rows, b.ncols())).copy_from(b);
        at += b.ncols();
    }
    out
}

/// Relative size of the smallest Cholesky pivot below which a symmetric
/// positive semidefinite matrix is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Cholesky factor of a symmetric positive definite matrix, or `None` when
/// the matrix is singular to within [`SINGULAR_TOL`].
pub fn cholesky(a: &DenseMatrix) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let n = a.nrows();
    if n == 0 {
        return None;
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    let smallest = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if smallest <= SINGULAR_TOL * scale {
        return None;
    }
    Some(chol)
}

/// log det of a symmetric positive definite matrix via its Cholesky pivots.
pub fn log_det_spd(a: &DenseMatrix) -> Option<f64> {
    let chol = cholesky(a)?;
    let l = chol.l_dirty();
    Some((0..a.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &DenseMatrix) -> Option<DenseMatrix> {
    let chol = cholesky(a)?;
    Some(symmetrize(&chol.inverse()))
}

/// `a' diag(w) b` for vectors.
pub fn weighted_dot(a: &DVector<f64>, w: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(w).zip(b.iter()).map(|((x, w), y)| x * w * y).sum()
}

/// `tr(diag(w) a)`.
pub fn weighted_trace(w: &[f64], a: &DenseMatrix) -> f64 {
    w.iter().enumerate().map(|(i, wi)| wi * a[(i, i)]).sum()
}

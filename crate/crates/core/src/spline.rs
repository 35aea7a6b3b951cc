//! Clamped B-spline bases on `[0, 1]`, difference penalties and the
//! penalized least-squares solver used by the flexible weight function.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Systems whose equilibrated condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Equidistant clamped B-spline basis on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SplineSpec", into = "SplineSpec")]
pub struct SplineBasis {
    segments: usize,
    degree: usize,
    knots: Vec<f64>,
}

/// Serialized form of a [`SplineBasis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub segments: usize,
    pub degree: usize,
}

impl Default for SplineSpec {
    fn default() -> Self {
        Self {
            segments: 25,
            degree: 3,
        }
    }
}

impl TryFrom<SplineSpec> for SplineBasis {
    type Error = Error;

    fn try_from(spec: SplineSpec) -> Result<Self> {
        SplineBasis::new(spec.segments, spec.degree)
    }
}

impl From<SplineBasis> for SplineSpec {
    fn from(b: SplineBasis) -> Self {
        b.spec()
    }
}

impl SplineBasis {
    pub fn new(segments: usize, degree: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::Domain("spline basis needs at least one segment".into()));
        }
        let mut knots = Vec::with_capacity(segments + 1 + 2 * degree);
        knots.extend(std::iter::repeat_n(0.0, degree));
        knots.extend((0..=segments).map(|j| j as f64 / segments as f64));
        knots.extend(std::iter::repeat_n(1.0, degree));
        Ok(Self {
            segments,
            degree,
            knots,
        })
    }

    pub fn spec(&self) -> SplineSpec {
        SplineSpec {
            segments: self.segments,
            degree: self.degree,
        }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of basis functions, `segments + degree`.
    pub fn len(&self) -> usize {
        self.segments + self.degree
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.len() - 1;
        let mut span = p + ((t * self.segments as f64).floor() as usize).min(self.segments - 1);
        while span > p && t < self.knots[span] {
            span -= 1;
        }
        while span < last && t >= self.knots[span + 1] {
            span += 1;
        }
        span
    }

    /// Values of the `degree + 1` functions that can be nonzero at `t`, and
    /// the index of the first of them.
    pub fn local(&self, t: f64) -> Result<(usize, Vec<f64>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("spline argument {t} is outside [0, 1]")));
        }
        let p = self.degree;
        let span = self.span(t);
        let u = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span - p, n))
    }

    /// All `len()` basis values at `t`.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let (first, local) = self.local(t)?;
        let mut out = vec![0.0; self.len()];
        out[first..first + local.len()].copy_from_slice(&local);
        Ok(out)
    }

    /// `|points| x len()` matrix with entry `(j, m) = b_m(points[j])`.
    pub fn design(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut b = DMatrix::zeros(points.len(), self.len());
        for (j, &t) in points.iter().enumerate() {
            let (first, local) = self.local(t)?;
            for (k, v) in local.into_iter().enumerate() {
                b[(j, first + k)] = v;
            }
        }
        Ok(b)
    }
}

/// Basis matrix for `segments` equidistant segments of the given degree.
pub fn build_basis(points: &[f64], segments: usize, degree: usize) -> Result<DMatrix<f64>> {
    SplineBasis::new(segments, degree)?.design(points)
}

/// `DᵀD` for the `order`-th difference operator.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub order: usize,
    pub matrix: DMatrix<f64>,
}

impl PenaltyMatrix {
    /// Zero penalty on `m` coefficients.
    pub fn none(m: usize) -> Self {
        Self {
            order: 0,
            matrix: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn quadratic_form(&self, coef: &DVector<f64>) -> f64 {
        coef.dot(&(&self.matrix * coef))
    }

    /// Embed into a `q x q` zero matrix with the block starting at `offset`.
    pub fn lift(&self, q: usize, offset: usize) -> Result<DMatrix<f64>> {
        let m = self.dim();
        if offset + m > q {
            return Err(Error::InvalidInput(format!(
                "cannot place a {m}x{m} penalty at offset {offset} in a {q}x{q} system"
            )));
        }
        let mut out = DMatrix::zeros(q, q);
        out.view_mut((offset, offset), (m, m)).copy_from(&self.matrix);
        Ok(out)
    }
}

/// The `(m - order) x m` finite-difference matrix.
pub fn difference_matrix(m: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || order >= m {
        return Err(Error::Domain(format!(
            "difference order {order} must satisfy 1 <= order < {m}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(m, m);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, m);
        for i in 0..rows {
            let diff = d.row(i + 1) - d.row(i);
            next.set_row(i, &diff);
        }
        d = next;
    }
    Ok(d)
}

pub fn difference_penalty(m: usize, order: usize) -> Result<PenaltyMatrix> {
    let d = difference_matrix(m, order)?;
    Ok(PenaltyMatrix {
        order,
        matrix: d.transpose() * d,
    })
}

/// Solution of a penalized least-squares problem.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: DVector<f64>,
    pub lambda: f64,
    /// `sigma2_hat * (XᵀX + λP)⁻¹`; NaN when no residual degrees of freedom remain.
    pub covariance: DMatrix<f64>,
    pub sigma2_hat: f64,
    pub edf: f64,
    pub rss: f64,
    pub n: usize,
}

impl PenalizedFit {
    /// `n * RSS / (n - edf)^2`, or `None` when `edf >= n`.
    pub fn gcv(&self) -> Option<f64> {
        let dof = self.n as f64 - self.edf;
        (dof > 1e-8).then(|| self.n as f64 * self.rss / (dof * dof))
    }
}

fn equilibration(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let q = a.nrows();
    let mut scale = DVector::zeros(q);
    let mut dead = Vec::new();
    for j in 0..q {
        let d = a[(j, j)];
        if !d.is_finite() {
            return Err(Error::NonFinite { row: j, col: j });
        }
        if d <= 0.0 {
            dead.push(j);
        } else {
            scale[j] = 1.0 / d.sqrt();
        }
    }
    if !dead.is_empty() {
        return Err(Error::RankDeficient {
            condition: f64::INFINITY,
            columns: dead,
        });
    }
    Ok(scale)
}

fn scaled(a: &DMatrix<f64>, scale: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * scale[r] * scale[c])
}

/// Reject symmetric PSD matrices whose Jacobi-equilibrated condition number
/// exceeds [`MAX_CONDITION`], naming the columns that load on the
/// near-null directions.
pub(crate) fn check_conditioning(a: &DMatrix<f64>) -> Result<()> {
    let q = a.nrows();
    let scale = equilibration(a)?;
    let eig = SymmetricEigen::new(scaled(a, &scale));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        let cut = max / MAX_CONDITION;
        let mut columns: Vec<usize> = Vec::new();
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= cut {
                let v = eig.eigenvectors.column(k);
                columns.extend((0..q).filter(|&j| v[j].abs() > 0.1));
            }
        }
        columns.sort_unstable();
        columns.dedup();
        return Err(Error::RankDeficient { condition, columns });
    }
    Ok(())
}

/// Inverse of a symmetric positive-definite matrix via an equilibrated
/// Cholesky factorization.
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = equilibration(a)?;
    let chol = scaled(a, &scale)
        .cholesky()
        .ok_or(Error::RankDeficient {
            condition: f64::INFINITY,
            columns: Vec::new(),
        })?;
    Ok(scaled(&chol.inverse(), &scale))
}

/// Identifiability check that does not depend on the size of λ: `XᵀX` and
/// `P` are each scaled to unit mean diagonal before being summed.
fn check_identifiable(xtx: &DMatrix<f64>, penalty: &DMatrix<f64>, lambda: f64) -> Result<()> {
    let q = xtx.nrows() as f64;
    let tx = xtx.trace();
    let tp = penalty.trace();
    let mut probe = if tx > 0.0 { xtx * (q / tx) } else { xtx.clone() };
    if lambda > 0.0 && tp > 0.0 {
        probe += penalty * (q / tp);
    }
    check_conditioning(&probe)
}

/// Solve `(XᵀX + λP)β = Xᵀy`.
pub fn penalized_ls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: &DMatrix<f64>,
    lambda: f64,
) -> Result<PenalizedFit> {
    let (n, q) = x.shape();
    if n == 0 {
        return Err(Error::InvalidInput("no observations".into()));
    }
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "design has {n} rows but outcome has {} entries",
            y.len()
        )));
    }
    if penalty.shape() != (q, q) {
        return Err(Error::InvalidInput(format!(
            "penalty is {:?}, expected {q}x{q}",
            penalty.shape()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda {lambda} must be finite and >= 0")));
    }
    let xtx = x.tr_mul(x);
    check_identifiable(&xtx, penalty, lambda)?;
    let a = &xtx + penalty * lambda;
    let a_inv = spd_inverse(&a)?;
    let coefficients = &a_inv * x.tr_mul(y);
    let edf = (&a_inv * &xtx).trace();
    let resid = y - x * &coefficients;
    let rss = resid.norm_squared();
    let dof = n as f64 - edf;
    let sigma2_hat = if dof > 1e-8 { rss / dof } else { f64::NAN };
    Ok(PenalizedFit {
        coefficients,
        lambda,
        covariance: a_inv * sigma2_hat,
        sigma2_hat,
        edf,
        rss,
        n,
    })
}

/// Ordinary least squares through the same checked solver.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<PenalizedFit> {
    let q = x.ncols();
    penalized_ls(x, y, &DMatrix::zeros(q, q), 0.0)
}

/// 30 log-spaced values on `[1e-4, 1e6]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..30)
        .map(|i| 10f64.powf(-4.0 + 10.0 * i as f64 / 29.0))
        .collect()
}

/// Outcome of a GCV search.
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub fit: PenalizedFit,
    /// GCV score per grid entry; `None` where the system was singular or
    /// left no residual degrees of freedom.
    pub scores: Vec<Option<f64>>,
}

/// Pick λ minimizing `n * RSS / (n - edf)^2`; ties go to the larger λ.
pub fn select_lambda_gcv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: &DMatrix<f64>,
    lambda_grid: &[f64],
) -> Result<LambdaSelection> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    if let Some(bad) = lambda_grid.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::Domain(format!("lambda {bad} must be >= 0")));
    }
    let fits: Vec<Result<PenalizedFit>> = lambda_grid
        .par_iter()
        .map(|&l| penalized_ls(x, y, penalty, l))
        .collect();
    let scores: Vec<Option<f64>> = fits
        .iter()
        .map(|f| f.as_ref().ok().and_then(PenalizedFit::gcv))
        .collect();
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bs = scores[b].unwrap();
                if s < bs || (s == bs && lambda_grid[i] > lambda_grid[b]) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let Some(best) = best else {
        let first_err = fits.into_iter().find_map(|f| f.err());
        return Err(first_err.unwrap_or_else(|| {
            Error::Domain("no lambda candidate left residual degrees of freedom".into())
        }));
    };
    let fit = fits.into_iter().nth(best).unwrap()?;
    Ok(LambdaSelection {
        lambda: lambda_grid[best],
        fit,
        scores,
    })
}

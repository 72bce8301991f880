//! Dense small-matrix kernels: metric-weighted least squares and online
//! maintenance of the inverse Gram matrix `H = (PᵀMP)⁻¹`.
//!
//! A [`RegressionCache`] owns the basis columns `P` together with `H` and
//! keeps the pair consistent under three structural edits (append, remove,
//! replace) and under rank-two perturbations of the metric itself. Every
//! online edit has a dense fallback: whenever a pivot or Sherman–Morrison
//! denominator degenerates, `H` is recomputed from scratch as a
//! pseudoinverse and the cache is marked rank deficient until a later
//! rebuild finds the Gram matrix nonsingular again.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Smallest admissible Schur complement `r − cᵀHc` for an appended column.
pub const SCHUR_TOLERANCE: f64 = 1e-10;
/// Smallest admissible diagonal pivot `H(i,i)` for a column removal.
pub const PIVOT_TOLERANCE: f64 = 1e-12;
/// Smallest admissible Sherman–Morrison denominator `1 + vᵀJ⁻¹u`.
pub const RANK_ONE_TOLERANCE: f64 = 1e-10;
/// Singular values below this fraction of the largest one are dropped.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;
/// Online edits between scheduled dense rebuilds.
pub const REBUILD_INTERVAL: usize = 500;

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Symmetric Mahalanobis metric matrix `M`.
///
/// Positive semidefiniteness is not enforced: the passive-aggressive
/// updates can in principle push eigenvalues below zero, and callers that
/// need a proper metric can opt into [`MetricMatrix::psd_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    m: Matrix,
}

impl MetricMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            m: Matrix::identity(dim, dim),
        }
    }

    /// Wraps a square, finite matrix that is symmetric within `1e-10`
    /// relative to its largest entry.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Input(format!(
                "metric must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("metric has non-finite entries".into()));
        }
        let metric = Self { m };
        if metric.symmetry_error() > SYMMETRY_TOLERANCE {
            return Err(Error::Input("metric is not symmetric".into()));
        }
        Ok(metric)
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn into_inner(self) -> Matrix {
        self.m
    }

    /// `M v`
    pub fn apply(&self, v: &Vector) -> Vector {
        &self.m * v
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &Vector) -> f64 {
        v.dot(&(&self.m * v))
    }

    /// `M ← M + η (a₋a₋ᵀ − a₊a₊ᵀ)`.
    ///
    /// Each entry pair `(i,j)`, `(j,i)` receives a bitwise identical
    /// increment, so symmetry is preserved exactly.
    pub fn add_scaled_difference(&mut self, eta: f64, a_minus: &Vector, a_plus: &Vector) {
        let d = self.dim();
        debug_assert_eq!(a_minus.len(), d);
        debug_assert_eq!(a_plus.len(), d);
        for j in 0..d {
            let (mj, pj) = (a_minus[j], a_plus[j]);
            for i in 0..d {
                self.m[(i, j)] += eta * (a_minus[i] * mj - a_plus[i] * pj);
            }
        }
    }

    /// Largest `|m_ij − m_ji|` relative to `max(1, max |m_ij|)`.
    pub fn symmetry_error(&self) -> f64 {
        let d = self.dim();
        let scale = self.m.amax().max(1.0);
        let mut worst = 0.0f64;
        for j in 0..d {
            for i in (j + 1)..d {
                worst = worst.max((self.m[(i, j)] - self.m[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Projection onto the PSD cone by clipping negative eigenvalues.
    pub fn psd_project(&self) -> Self {
        let eig = SymmetricEigen::new(self.m.clone());
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let v = &eig.eigenvectors;
        let mut m = v * Matrix::from_diagonal(&clipped) * v.transpose();
        // Reconstruction noise is not symmetric bit-for-bit.
        m = (&m + m.transpose()) * 0.5;
        Self { m }
    }
}

/// Coefficients and metric-weighted residual of one regression solve.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSolution {
    pub coeffs: Vector,
    /// `(y − Px)ᵀ M (y − Px)`, clamped at zero.
    pub residual: f64,
}

/// How an edit reached its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditPath {
    Online,
    DenseRebuild(RebuildReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RebuildReason {
    /// The appended column lies (numerically) in the span of the basis.
    DegenerateColumn,
    /// `H(i,i)` was too small to remove column `i` online.
    SmallPivot,
    /// A Sherman–Morrison denominator vanished.
    SingularRankOne,
    /// The cache was already rank deficient; online formulas do not apply.
    RankDeficient,
    /// `‖H‖_F·‖G‖_F` exceeded `1 / PINV_RELATIVE_CUTOFF`: the Gram matrix
    /// may have singular values the pseudoinverse would drop.
    IllConditioned,
    /// Periodic drift control.
    Scheduled,
}

/// Basis columns `P` together with the maintained inverse `(PᵀMP)⁻¹`.
#[derive(Debug, Clone)]
pub struct RegressionCache {
    dim: usize,
    capacity: usize,
    columns: Vec<Vector>,
    /// `PᵀMP`, kept alongside `H` for the conditioning check
    gram: Matrix,
    inverse: Matrix,
    edits_since_rebuild: usize,
    rank_deficient: bool,
}

impl RegressionCache {
    /// An empty cache over `dim`-dimensional samples.
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            dim,
            capacity,
            columns: Vec::new(),
            gram: Matrix::zeros(0, 0),
            inverse: Matrix::zeros(0, 0),
            edits_since_rebuild: 0,
            rank_deficient: false,
        }
    }

    /// Builds the cache densely from `columns`.
    pub fn build(metric: &MetricMatrix, columns: Vec<Vector>, capacity: usize) -> Result<Self> {
        let dim = metric.dim();
        if columns.len() > capacity {
            return Err(Error::Input(format!(
                "{} columns exceed capacity {capacity}",
                columns.len()
            )));
        }
        for c in &columns {
            check_dim(dim, c)?;
        }
        let mut cache = Self {
            dim,
            capacity,
            columns,
            gram: Matrix::zeros(0, 0),
            inverse: Matrix::zeros(0, 0),
            edits_since_rebuild: 0,
            rank_deficient: false,
        };
        cache.rebuild(metric);
        Ok(cache)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Vector] {
        &self.columns
    }

    /// The maintained `H`.
    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    /// True while `H` holds a pseudoinverse of a singular Gram matrix.
    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// `P` as a `d × N` matrix.
    pub fn basis_matrix(&self) -> Matrix {
        if self.columns.is_empty() {
            return Matrix::zeros(self.dim, 0);
        }
        Matrix::from_columns(&self.columns)
    }

    /// Dense `PᵀMP`.
    pub fn gram(&self, metric: &MetricMatrix) -> Matrix {
        gram_matrix(&self.columns, metric)
    }

    /// `Pᵀ v`
    fn project(&self, v: &Vector) -> Vector {
        Vector::from_iterator(self.columns.len(), self.columns.iter().map(|c| c.dot(v)))
    }

    /// `‖H·(PᵀMP) − I‖_F / ‖I‖_F`; zero for an empty cache.
    pub fn inverse_error(&self, metric: &MetricMatrix) -> f64 {
        let n = self.len();
        if n == 0 {
            return 0.0;
        }
        let product = &self.inverse * self.gram(metric);
        (product - Matrix::identity(n, n)).norm() / (n as f64).sqrt()
    }

    /// Recomputes `H` as the pseudoinverse of the Gram matrix.
    pub fn rebuild(&mut self, metric: &MetricMatrix) {
        self.gram = self.gram(metric);
        let (inverse, rank) = pseudo_inverse(&self.gram);
        self.inverse = inverse;
        self.rank_deficient = rank < self.columns.len();
        self.edits_since_rebuild = 0;
    }

    fn finish_online_edit(&mut self, metric: &MetricMatrix) -> EditPath {
        self.edits_since_rebuild += 1;
        // upper bound on the condition number of G
        if self.inverse.norm() * self.gram.norm() * PINV_RELATIVE_CUTOFF > 1.0 {
            return self.fallback(metric, RebuildReason::IllConditioned);
        }
        if self.edits_since_rebuild >= REBUILD_INTERVAL {
            self.rebuild(metric);
            EditPath::DenseRebuild(RebuildReason::Scheduled)
        } else {
            EditPath::Online
        }
    }

    fn fallback(&mut self, metric: &MetricMatrix, reason: RebuildReason) -> EditPath {
        self.rebuild(metric);
        EditPath::DenseRebuild(reason)
    }

    /// Solves `min_x (y − Px)ᵀ M (y − Px)` using the maintained inverse.
    pub fn solve(&self, metric: &MetricMatrix, y: &Vector) -> Result<RegressionSolution> {
        check_dim(self.dim, y)?;
        if metric.dim() != self.dim {
            return Err(Error::dim(self.dim, metric.dim()));
        }
        let my = metric.apply(y);
        Ok(self.solve_with_weighted(metric, y, &my))
    }

    /// Same as [`solve`](Self::solve) with `M y` supplied by the caller, so
    /// that several caches can share one matrix-vector product.
    pub fn solve_with_weighted(&self, metric: &MetricMatrix, y: &Vector, my: &Vector) -> RegressionSolution {
        let coeffs = &self.inverse * self.project(my);
        let residual = metric_residual(&self.columns, metric, y, &coeffs);
        RegressionSolution { coeffs, residual }
    }

    /// Appends `new_col` and grows `H` with the bordered-inverse identity.
    pub fn push_column(&mut self, metric: &MetricMatrix, new_col: Vector) -> Result<EditPath> {
        check_dim(self.dim, &new_col)?;
        if self.columns.len() >= self.capacity {
            return Err(Error::Input(format!(
                "cache is at capacity ({})",
                self.capacity
            )));
        }
        // more columns than dimensions can never be independent
        if self.rank_deficient || self.columns.len() >= self.dim {
            self.columns.push(new_col);
            return Ok(self.fallback(metric, RebuildReason::RankDeficient));
        }

        let m_dp = metric.apply(&new_col);
        let c = self.project(&m_dp);
        let hc = &self.inverse * &c;
        // r − cᵀHc, evaluated as the M-norm of the projection residual
        // Δp − P·Hc; the direct difference cancels catastrophically for
        // columns that are (nearly) in the span of P
        let mut resid = new_col.clone();
        for (col, &x) in self.columns.iter().zip(hc.iter()) {
            resid.axpy(-x, col, 1.0);
        }
        let schur = metric.quad_form(&resid);
        self.columns.push(new_col);
        if schur.abs() < SCHUR_TOLERANCE {
            return Ok(self.fallback(metric, RebuildReason::DegenerateColumn));
        }

        let n = hc.len();
        let r = self.columns[n].dot(&m_dp);
        self.gram = self.gram.clone().insert_row(n, 0.0).insert_column(n, 0.0);
        for i in 0..n {
            self.gram[(i, n)] = c[i];
            self.gram[(n, i)] = c[i];
        }
        self.gram[(n, n)] = r;
        let inv_s = 1.0 / schur;
        let mut grown = Matrix::zeros(n + 1, n + 1);
        for j in 0..n {
            for i in 0..n {
                grown[(i, j)] = self.inverse[(i, j)] + hc[i] * hc[j] * inv_s;
            }
            grown[(n, j)] = -hc[j] * inv_s;
            grown[(j, n)] = -hc[j] * inv_s;
        }
        grown[(n, n)] = inv_s;
        self.inverse = grown;
        Ok(self.finish_online_edit(metric))
    }

    /// Removes column `index` and shrinks `H` with the pivot identity
    /// `H(I,I) − H(I,i)H(i,I)/H(i,i)`. Later columns shift down by one.
    pub fn remove_column(&mut self, metric: &MetricMatrix, index: usize) -> Result<EditPath> {
        let n = self.columns.len();
        if index >= n {
            return Err(Error::Input(format!(
                "column index {index} out of range for {n} columns"
            )));
        }
        self.columns.remove(index);
        if self.rank_deficient {
            return Ok(self.fallback(metric, RebuildReason::RankDeficient));
        }
        let pivot = self.inverse[(index, index)];
        if pivot.abs() < PIVOT_TOLERANCE {
            return Ok(self.fallback(metric, RebuildReason::SmallPivot));
        }

        let h_col: Vector = self.inverse.column(index).clone_owned();
        let keep = |k: usize| if k < index { k } else { k + 1 };
        let mut shrunk = Matrix::zeros(n - 1, n - 1);
        for j in 0..(n - 1) {
            let sj = keep(j);
            for i in 0..(n - 1) {
                let si = keep(i);
                shrunk[(i, j)] = self.inverse[(si, sj)] - h_col[si] * self.inverse[(index, sj)] / pivot;
            }
        }
        self.inverse = shrunk;
        self.gram = self.gram.clone().remove_row(index).remove_column(index);
        Ok(self.finish_online_edit(metric))
    }

    /// Replaces column `index` by `new_col`: removal followed by append, so
    /// the new column always ends up last.
    pub fn replace_column(
        &mut self,
        metric: &MetricMatrix,
        index: usize,
        new_col: Vector,
    ) -> Result<EditPath> {
        check_dim(self.dim, &new_col)?;
        let removed = self.remove_column(metric, index)?;
        let added = self.push_column(metric, new_col)?;
        Ok(match (removed, added) {
            (EditPath::DenseRebuild(r), EditPath::Online) => EditPath::DenseRebuild(r),
            (_, other) => other,
        })
    }

    /// Propagates `M' = M + η(a₋a₋ᵀ − a₊a₊ᵀ)` into `H` as two
    /// Sherman–Morrison steps. `updated` must already be `M'`; it is only
    /// read when a dense rebuild is needed.
    pub fn apply_metric_perturbation(
        &mut self,
        updated: &MetricMatrix,
        a_minus: &Vector,
        a_plus: &Vector,
        eta: f64,
    ) -> Result<EditPath> {
        check_dim(self.dim, a_minus)?;
        check_dim(self.dim, a_plus)?;
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::Input(format!("step length must be >= 0, got {eta}")));
        }
        if eta == 0.0 || self.columns.is_empty() {
            return Ok(EditPath::Online);
        }
        if self.rank_deficient {
            return Ok(self.fallback(updated, RebuildReason::RankDeficient));
        }

        let pm = self.project(a_minus);
        let pp = self.project(a_plus);
        let step = rank_one_inverse_update(&self.inverse, &(&pm * eta), &pm)
            .and_then(|h| rank_one_inverse_update(&h, &(&pp * -eta), &pp));
        match step {
            Ok(h) => {
                self.inverse = h;
                self.gram += (&pm * pm.transpose() - &pp * pp.transpose()) * eta;
                Ok(self.finish_online_edit(updated))
            }
            Err(_) => Ok(self.fallback(updated, RebuildReason::SingularRankOne)),
        }
    }
}

/// `(J + uvᵀ)⁻¹` from `J⁻¹` via the Sherman–Morrison identity.
pub fn rank_one_inverse_update(j_inv: &Matrix, u: &Vector, v: &Vector) -> Result<Matrix> {
    let n = j_inv.nrows();
    if j_inv.ncols() != n {
        return Err(Error::Input("inverse must be square".into()));
    }
    check_dim(n, u)?;
    check_dim(n, v)?;
    let ju = j_inv * u;
    let vj = j_inv.tr_mul(v);
    let denom = 1.0 + v.dot(&ju);
    if !(denom.abs() >= RANK_ONE_TOLERANCE) {
        return Err(Error::Numerical(format!(
            "rank-one update denominator {denom:e} is singular"
        )));
    }
    Ok(j_inv - (ju * vj.transpose()) / denom)
}

/// Pseudoinverse of a symmetric matrix with the relative cutoff
/// [`PINV_RELATIVE_CUTOFF`], returned together with the numerical rank.
///
/// For symmetric input the eigendecomposition is an SVD with `σ = |λ|`.
/// It is used instead of the general SVD routine, which was seen to return
/// factors that do not reconstruct Gram matrices with a repeated zero
/// singular value.
pub fn pseudo_inverse(a: &Matrix) -> (Matrix, usize) {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return (Matrix::zeros(a.ncols(), n), 0);
    }
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) {
        return (Matrix::zeros(n, n), 0);
    }
    let cutoff = PINV_RELATIVE_CUTOFF * top;
    let mut rank = 0;
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cutoff {
            rank += 1;
            scaled.column_mut(k).scale_mut(1.0 / lambda);
        } else {
            scaled.column_mut(k).fill(0.0);
        }
    }
    (scaled * eig.eigenvectors.transpose(), rank)
}

/// Dense `PᵀMP` for a list of columns.
pub fn gram_matrix(columns: &[Vector], metric: &MetricMatrix) -> Matrix {
    let n = columns.len();
    let weighted: Vec<Vector> = columns.iter().map(|c| metric.apply(c)).collect();
    let mut gram = Matrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let g = columns[i].dot(&weighted[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    gram
}

/// `(y − Px)ᵀ M (y − Px)`, clamped at zero.
fn metric_residual(columns: &[Vector], metric: &MetricMatrix, y: &Vector, coeffs: &Vector) -> f64 {
    let mut r = y.clone();
    for (c, &x) in columns.iter().zip(coeffs.iter()) {
        r.axpy(-x, c, 1.0);
    }
    metric.quad_form(&r).max(0.0)
}

/// Solves the metric-weighted regression against the cache.
pub fn solve_regression(
    cache: &RegressionCache,
    metric: &MetricMatrix,
    y: &Vector,
) -> Result<RegressionSolution> {
    if cache.dim() != metric.dim() {
        return Err(Error::dim(cache.dim(), metric.dim()));
    }
    cache.solve(metric, y)
}

/// Cache-free solve: forms the Gram matrix and applies its pseudoinverse.
pub fn solve_regression_dense(
    columns: &[Vector],
    metric: &MetricMatrix,
    y: &Vector,
) -> Result<RegressionSolution> {
    check_dim(metric.dim(), y)?;
    for c in columns {
        check_dim(metric.dim(), c)?;
    }
    let (h, _) = pseudo_inverse(&gram_matrix(columns, metric));
    let my = metric.apply(y);
    let b = Vector::from_iterator(columns.len(), columns.iter().map(|c| c.dot(&my)));
    let coeffs = h * b;
    let residual = metric_residual(columns, metric, y, &coeffs);
    Ok(RegressionSolution { coeffs, residual })
}

pub(crate) fn check_dim(expected: usize, v: &Vector) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(expected, v.len()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    pub fn random_vector(rng: &mut impl Rng, d: usize) -> Vector {
        Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// `AᵀA/d + I`: well conditioned and positive definite.
    pub fn random_spd_metric(rng: &mut impl Rng, d: usize) -> MetricMatrix {
        let a = random_matrix(rng, d, d);
        let m = a.transpose() * &a / d as f64 + Matrix::identity(d, d);
        MetricMatrix::from_matrix((&m + m.transpose()) * 0.5).unwrap()
    }

    pub fn dense_inverse(columns: &[Vector], metric: &MetricMatrix) -> Matrix {
        let p = Matrix::from_columns(columns);
        (p.transpose() * metric.as_matrix() * &p)
            .try_inverse()
            .expect("test gram matrix should be invertible")
    }

    pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }
}

//! Sparse symmetric positive-definite precision matrices.
//!
//! [`SparsePrecision`] is the numeric core of the engine: conditional
//! autoregression over the county graph, unit-variance AR(1) over days, and
//! Kronecker products of the two. Storage is compressed sparse rows holding
//! both triangles, so row access, matrix-vector products, and quadratic
//! forms stay cheap during sampling. The Cholesky factor is computed densely
//! on first use and cached; problem sizes after region subsetting stay small
//! enough that a dense factor is faster and far simpler than a fill-reducing
//! sparse one.
//!
//! Structural zeros are kept: the stored pattern always reflects the graph
//! (or product) structure even where a coefficient happens to be 0, so
//! sparsity counts are invariant to parameter values.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::CountyGraph;

/// Symmetric positive-definite sparse matrix with a cached factorization.
#[derive(Debug)]
pub struct SparsePrecision {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    factor: OnceLock<Option<CholeskyFactor>>,
}

impl Clone for SparsePrecision {
    fn clone(&self) -> Self {
        // The factor cache is cheap to rebuild relative to cloning a dense L.
        SparsePrecision {
            dim: self.dim,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.clone(),
            factor: OnceLock::new(),
        }
    }
}

/// Dense lower-triangular Cholesky factor L with Q = L Lᵀ.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factors a dense symmetric matrix. Returns None when not positive
    /// definite.
    pub fn of_dense(m: DMatrix<f64>) -> Option<CholeskyFactor> {
        let chol = nalgebra::Cholesky::new(m)?;
        let l = chol.unpack();
        let log_det = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !log_det.is_finite() {
            return None;
        }
        Some(CholeskyFactor { l, log_det })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// log det Q (not of L).
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves Q x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let y = self
            .l
            .solve_lower_triangular(&nalgebra::DVector::from_column_slice(b))
            .expect("Cholesky factor has positive diagonal");
        let x = self
            .l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has positive diagonal");
        x.data.into()
    }

    /// Solves Lᵀ x = z. With z standard normal, x has covariance Q⁻¹; this
    /// is the back-substitution step of exact GMRF sampling.
    pub fn solve_lt(&self, z: &[f64]) -> Vec<f64> {
        let x = self
            .l
            .tr_solve_lower_triangular(&nalgebra::DVector::from_column_slice(z))
            .expect("Cholesky factor has positive diagonal");
        x.data.into()
    }
}

impl SparsePrecision {
    fn from_sorted_rows(dim: usize, rows: Vec<Vec<(usize, f64)>>) -> SparsePrecision {
        debug_assert_eq!(rows.len(), dim);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0), "row not sorted");
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparsePrecision {
            dim,
            row_ptr,
            cols,
            vals,
            factor: OnceLock::new(),
        }
    }

    /// Assembles a symmetric matrix from upper-triangle entries (i <= j).
    /// Duplicate positions sum; mirrored lower-triangle entries are implied.
    ///
    /// # Errors
    ///
    /// Rejects out-of-range indices, lower-triangle input, and non-finite
    /// values.
    pub fn from_triplets(dim: usize, entries: &[(usize, usize, f64)]) -> Result<SparsePrecision> {
        if dim == 0 {
            return Err(Error::Precision("dimension must be positive".into()));
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(i, j, v) in entries {
            if i >= dim || j >= dim {
                return Err(Error::Precision(format!(
                    "entry ({i}, {j}) outside dimension {dim}"
                )));
            }
            if i > j {
                return Err(Error::Precision(
                    "pass upper-triangle entries only (i <= j)".into(),
                ));
            }
            if !v.is_finite() {
                return Err(Error::Precision(format!("non-finite value at ({i}, {j})")));
            }
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut merged = Vec::with_capacity(dim);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, v) in row {
                match out.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => out.push((c, v)),
                }
            }
            merged.push(out);
        }
        Ok(SparsePrecision::from_sorted_rows(dim, merged))
    }

    pub fn identity(dim: usize) -> SparsePrecision {
        SparsePrecision::from_sorted_rows(dim, (0..dim).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Count of stored entries off the diagonal (both triangles).
    pub fn nnz_off_diagonal(&self) -> usize {
        (0..self.dim)
            .map(|i| self.row_entries(i).filter(|&(j, _)| j != i).count())
            .sum()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.cols[lo..hi].binary_search(&j) {
            Ok(pos) => self.vals[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.cols[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "matvec dimension mismatch");
        (0..self.dim)
            .map(|i| self.row_entries(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// (x - mean)ᵀ Q (x - mean). A zero-length mean is treated as zero.
    pub fn quadform(&self, x: &[f64], mean: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "quadform dimension mismatch");
        assert!(
            mean.is_empty() || mean.len() == self.dim,
            "quadform mean length mismatch"
        );
        let centered = |k: usize| {
            if mean.is_empty() {
                x[k]
            } else {
                x[k] - mean[k]
            }
        };
        let mut acc = 0.0;
        for i in 0..self.dim {
            let ci = centered(i);
            let mut row = 0.0;
            for (j, v) in self.row_entries(i) {
                row += v * centered(j);
            }
            acc += ci * row;
        }
        acc
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row_entries(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Dense sub-block Q[idx, idx] in the order given.
    pub fn dense_block(&self, idx: &[usize]) -> DMatrix<f64> {
        let k = idx.len();
        let mut m = DMatrix::zeros(k, k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                m[(a, b)] = self.get(i, j);
            }
        }
        m
    }

    /// Cached Cholesky factor of the full matrix.
    ///
    /// # Errors
    ///
    /// Fails when the matrix is not positive definite (for example a
    /// conditional autoregression at the boundary of its valid range).
    pub fn cholesky(&self) -> Result<&CholeskyFactor> {
        let cached = self
            .factor
            .get_or_init(|| CholeskyFactor::of_dense(self.to_dense()));
        cached
            .as_ref()
            .ok_or_else(|| Error::Precision("matrix is not positive definite".into()))
    }

    /// log det Q via the cached factor.
    pub fn log_det(&self) -> Result<f64> {
        Ok(self.cholesky()?.log_det())
    }
}

/// Conditional autoregression precision over a county graph:
/// `tau * (diag(degree) - rho * adjacency)`.
///
/// Positive definite for `rho` in `[0, 1)`; the boundary value 1 produces
/// the graph Laplacian, which is singular on a connected graph and is
/// rejected at factorization time.
///
/// # Errors
///
/// `rho` outside `[0, 1)` or non-positive `tau`.
pub fn car_precision(graph: &CountyGraph, rho: f64, tau: f64) -> Result<SparsePrecision> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Parameter(format!(
            "CAR rho must lie in [0, 1), got {rho}"
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("CAR tau must be positive, got {tau}")));
    }
    let n = graph.n_regions();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = graph.neighbors(i);
        let mut row = Vec::with_capacity(nbrs.len() + 1);
        let mut placed_diag = false;
        for &j in nbrs {
            if !placed_diag && j > i {
                row.push((i, tau * graph.degree(i) as f64));
                placed_diag = true;
            }
            row.push((j, -tau * rho));
        }
        if !placed_diag {
            row.push((i, tau * graph.degree(i) as f64));
        }
        rows.push(row);
    }
    Ok(SparsePrecision::from_sorted_rows(n, rows))
}

/// Precision of a unit-marginal-variance AR(1) sequence of length `n` with
/// lag-one correlation `rho`: the inverse of the covariance
/// `C[t, s] = rho^|t - s|`.
///
/// # Errors
///
/// `rho` outside `(-1, 1)` or `n == 0`.
pub fn ar1_precision(n: usize, rho: f64) -> Result<SparsePrecision> {
    if n == 0 {
        return Err(Error::Parameter("AR(1) length must be positive".into()));
    }
    if !(-1.0..1.0).contains(&rho) || !(rho > -1.0) {
        return Err(Error::Parameter(format!(
            "AR(1) rho must lie in (-1, 1), got {rho}"
        )));
    }
    if n == 1 {
        return Ok(SparsePrecision::identity(1));
    }
    let scale = 1.0 / (1.0 - rho * rho);
    let end = scale;
    let mid = scale * (1.0 + rho * rho);
    let off = -scale * rho;
    let mut rows = Vec::with_capacity(n);
    for t in 0..n {
        let diag = if t == 0 || t == n - 1 { end } else { mid };
        let mut row = Vec::with_capacity(3);
        if t > 0 {
            row.push((t - 1, off));
        }
        row.push((t, diag));
        if t + 1 < n {
            row.push((t + 1, off));
        }
        rows.push(row);
    }
    Ok(SparsePrecision::from_sorted_rows(n, rows))
}

/// Kronecker product `a (x) b`. Row `i * b.dim() + k` of the result pairs
/// row `i` of `a` with row `k` of `b`, so with `a` the spatial factor and
/// `b` the temporal factor the joint index is region-major: cell (region r,
/// day d) sits at `r * n_days + d`.
///
/// # Errors
///
/// Dimension overflow.
pub fn kron_precision(a: &SparsePrecision, b: &SparsePrecision) -> Result<SparsePrecision> {
    let dim = a
        .dim()
        .checked_mul(b.dim())
        .ok_or_else(|| Error::Precision("Kronecker dimension overflow".into()))?;
    let nb = b.dim();
    let mut rows = Vec::with_capacity(dim);
    for i in 0..a.dim() {
        for k in 0..nb {
            let mut row = Vec::new();
            for (j, av) in a.row_entries(i) {
                for (l, bv) in b.row_entries(k) {
                    row.push((j * nb + l, av * bv));
                }
            }
            rows.push(row);
        }
    }
    Ok(SparsePrecision::from_sorted_rows(dim, rows))
}

//! Matrix domain types and the coordinate-to-distance map.
//!
//! Every distance-like matrix in this crate stores **squared** Euclidean
//! distances: `D[i][j] = ‖x_i − x_j‖²`. For `n` points in `k` dimensions
//! such a matrix is symmetric, has a zero diagonal, nonnegative entries and
//! rank at most `k + 2`.
//!
//! Index sets (`ObservationMask`) select which entries of an `n × n` matrix
//! are observed; [`apply_mask`] zeroes everything outside the set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used for symmetry checks.
pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-9;
/// Relative tolerance (against the largest singular value) for rank checks.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// `n × k` matrix of sensor positions, one row per sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMatrix(DMatrix<f64>);

impl CoordinateMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::config(
                "coordinates",
                format!("need n >= 1 and k >= 1, got {}x{}", entries.nrows(), entries.ncols()),
            ));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "coordinate matrix contains non-finite value {bad}"
            )));
        }
        Ok(Self(entries))
    }

    /// Builds from row-major data.
    pub fn from_rows(n: usize, k: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::dims("coordinate rows", n * k, data.len()));
        }
        Self::new(DMatrix::from_row_slice(n, k, data))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }
}

/// Symmetric, zero-diagonal matrix of squared distances.
///
/// `certified_edm` is true only for matrices produced by [`edm_from_coords`];
/// observed or estimated matrices may carry negative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredDistanceMatrix {
    entries: DMatrix<f64>,
    certified_edm: bool,
}

impl SquaredDistanceMatrix {
    /// Wraps `entries` after checking squareness, exact symmetry, a zero
    /// diagonal and finiteness. The result is not certified.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::dims(
                "squared distance matrix",
                format!("{n}x{n}"),
                format!("{}x{}", n, entries.ncols()),
            ));
        }
        for i in 0..n {
            if entries[(i, i)] != 0.0 {
                return Err(Error::InvariantViolation(format!(
                    "distance matrix diagonal entry ({i},{i}) is {}",
                    entries[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if !a.is_finite() {
                    return Err(Error::InvariantViolation(format!(
                        "distance matrix entry ({i},{j}) is not finite"
                    )));
                }
                if a != b {
                    return Err(Error::InvariantViolation(format!(
                        "distance matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self {
            entries,
            certified_edm: false,
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, n),
            certified_edm: true,
        }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn certified_edm(&self) -> bool {
        self.certified_edm
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Number of strictly negative entries.
    pub fn negative_count(&self) -> usize {
        self.entries.iter().filter(|v| **v < 0.0).count()
    }
}

/// Symmetric set of observed index pairs `E` over an `n × n` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    n: usize,
    observed: Vec<bool>,
}

impl ObservationMask {
    /// Builds a mask from a predicate evaluated on the upper triangle
    /// (including the diagonal) and mirrored, so the result is symmetric.
    pub fn from_upper_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut observed = vec![false; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                observed[i * n + j] = v;
                observed[j * n + i] = v;
            }
        }
        Self { n, observed }
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            observed: vec![true; n * n],
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            observed: vec![false; n * n],
        }
    }

    pub fn diagonal(n: usize) -> Self {
        Self::from_upper_fn(n, |i, j| i == j)
    }

    /// Builds from an explicit pair list; rejects lists that are not
    /// closed under transposition.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut observed = vec![false; n * n];
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::dims("mask pair", format!("< {n}"), format!("({i},{j})")));
            }
            observed[i * n + j] = true;
        }
        let mask = Self { n, observed };
        if !mask.is_symmetric() {
            return Err(Error::InvariantViolation(
                "observation mask is not symmetric".into(),
            ));
        }
        Ok(mask)
    }

    /// Builds from upper-triangle pairs `i <= j`, mirroring each one.
    pub fn from_upper_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut observed = vec![false; n * n];
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::dims("mask pair", format!("< {n}"), format!("({i},{j})")));
            }
            if i > j {
                return Err(Error::InvariantViolation(format!(
                    "mask pair ({i},{j}) is not in the upper triangle"
                )));
            }
            observed[i * n + j] = true;
            observed[j * n + i] = true;
        }
        Ok(Self { n, observed })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.n + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (i + 1..self.n).all(|j| self.contains(i, j) == self.contains(j, i)))
    }

    pub fn includes_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.contains(i, i))
    }

    /// The complement `E^c`: every pair not in `E`.
    pub fn complement(&self) -> Self {
        Self {
            n: self.n,
            observed: self.observed.iter().map(|v| !v).collect(),
        }
    }

    /// Number of observed ordered pairs.
    pub fn len(&self) -> usize {
        self.observed.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observed pairs with `i <= j`, in row-major order.
    pub fn upper_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i..self.n {
                if self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Observed pairs with `i < j`, in row-major order.
    pub fn upper_offdiag_pairs(&self) -> Vec<(usize, usize)> {
        self.upper_pairs().into_iter().filter(|(i, j)| i != j).collect()
    }
}

/// Complement of an observation mask.
pub fn complement_mask(mask: &ObservationMask) -> ObservationMask {
    mask.complement()
}

/// Sparse outlier estimate, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMatrix(DMatrix<f64>);

impl OutlierMatrix {
    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::dims(
                "outlier matrix",
                "square",
                format!("{}x{}", entries.nrows(), entries.ncols()),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(
                "outlier matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self(entries))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Index pairs of nonzero entries, row-major.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if self.0[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> usize {
        self.0.iter().filter(|v| **v != 0.0).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.0 == self.0.transpose()
    }
}

/// Pairwise squared distances between the rows of `x`.
///
/// Equivalent to `1 diag(XXᵀ)ᵀ + diag(XXᵀ) 1ᵀ − 2XXᵀ`, but evaluated through
/// coordinate differences so that the output is exactly symmetric and
/// nonnegative.
pub fn edm_from_coords(x: &CoordinateMatrix) -> SquaredDistanceMatrix {
    SquaredDistanceMatrix {
        entries: squared_distances(x.as_matrix()),
        certified_edm: true,
    }
}

pub(crate) fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = x.shape();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for c in 0..k {
                let diff = x[(i, c)] - x[(j, c)];
                s += diff * diff;
            }
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// `P_E(M)`: keeps entries in `E`, zeroes the rest.
pub fn apply_mask(m: &DMatrix<f64>, mask: &ObservationMask) -> Result<DMatrix<f64>> {
    let n = mask.n();
    if m.shape() != (n, n) {
        return Err(Error::dims(
            "apply_mask",
            format!("{n}x{n}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if mask.contains(i, j) {
            m[(i, j)]
        } else {
            0.0
        }
    }))
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Diagnostic summary produced by [`check_edm_properties`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdmReport {
    pub symmetric: bool,
    pub zero_diagonal: bool,
    pub nonnegative: bool,
    pub rank_bound: bool,
    pub max_asymmetry: f64,
    pub max_abs_diagonal: f64,
    pub min_entry: f64,
    /// `σ_{k+3} / σ_1`, or 0 when `n < k + 3`.
    pub rank_ratio: f64,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

impl EdmReport {
    pub fn all_pass(&self) -> bool {
        self.symmetric && self.zero_diagonal && self.nonnegative && self.rank_bound
    }
}

/// Checks symmetry (absolute `tol`), zero diagonal, nonnegativity, and the
/// `rank ≤ k + 2` bound: every singular value past the `(k+2)`-th must be
/// at most `tol · σ_1`.
///
/// Zero-diagonal and nonnegativity are checked exactly.
pub fn check_edm_properties(d: &DMatrix<f64>, k: usize, tol: f64) -> EdmReport {
    let n = d.nrows();
    let mut max_asymmetry: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n.min(d.ncols()) {
            max_asymmetry = max_asymmetry.max((d[(i, j)] - d[(j, i)]).abs());
        }
    }
    let max_abs_diagonal = (0..n.min(d.ncols()))
        .map(|i| d[(i, i)].abs())
        .fold(0.0, f64::max);
    let min_entry = d.iter().copied().fold(f64::INFINITY, f64::min);

    let mut singular_values: Vec<f64> = if n == 0 {
        Vec::new()
    } else {
        d.clone().svd(false, false).singular_values.iter().copied().collect()
    };
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let sigma1 = singular_values.first().copied().unwrap_or(0.0);
    let tail = singular_values.get(k + 2).copied().unwrap_or(0.0);
    let rank_ratio = if sigma1 > 0.0 { tail / sigma1 } else { 0.0 };

    EdmReport {
        symmetric: d.nrows() == d.ncols() && max_asymmetry <= tol,
        zero_diagonal: max_abs_diagonal == 0.0,
        nonnegative: n == 0 || min_entry >= 0.0,
        rank_bound: tail <= tol * sigma1,
        max_asymmetry,
        max_abs_diagonal,
        min_entry,
        rank_ratio,
        singular_values,
    }
}

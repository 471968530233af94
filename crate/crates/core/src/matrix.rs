//! Dense square matrices, compartmental validation, flow parametrization and
//! permutation conjugation.
//!
//! Indices are 0-based in the Rust API. Everything that is serialized for a
//! reader (violation reports, permutations, vertex sets) is 1-based.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default validation tolerance for matrices read from decimal input.
pub const DEFAULT_VALIDATION_TOL: f64 = 1e-12;

/// Correctly rounded sum of `values` (Shewchuk's partials algorithm).
///
/// The result does not depend on the order of `values`, so column sums stay
/// bit-identical under permutation conjugation.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to nearest, handling the half-way case like fsum.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Dense `n x n` matrix of finite reals, stored row-major.
#[derive(Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Shape("n = 0".into()));
        }
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {} entries for n = {n}, got {}",
                n * n,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: k / n + 1,
                col: k % n + 1,
                value: data[k],
            });
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::Shape(format!(
                "row {} has {} entries, expected {n}",
                i + 1,
                r.len()
            )));
        }
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "matrix dimension must be positive");
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self::new(n, data)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Panics on non-finite values; callers building matrices entrywise
    /// should go through [`SquareMatrix::new`] when the data is untrusted.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(value.is_finite(), "non-finite matrix entry at ({i}, {j})");
        self.data[i * self.n + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.get(i, j))
    }

    /// Correctly rounded column sum.
    pub fn column_sum(&self, j: usize) -> f64 {
        exact_sum(self.column(j))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.column_sum(j)).collect()
    }

    /// `M x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        self.data
            .chunks(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `v^T M`
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        let mut out = vec![0.0; self.n];
        for (i, vi) in v.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += vi * self.get(i, j);
            }
        }
        out
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> SquareMatrix {
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn add(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, other.n);
        SquareMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> SquareMatrix {
        SquareMatrix {
            n: self.n,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm_1(&self) -> f64 {
        (0..self.n)
            .map(|j| self.column(j).map(f64::abs).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest entry strictly above the diagonal, or 0 for `n = 1`.
    pub fn max_above_diagonal(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                m = m.max(self.get(i, j));
            }
        }
        if m.is_finite() {
            m
        } else {
            0.0
        }
    }

    pub fn is_metzler(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| i == j || self.get(i, j) >= 0.0))
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl fmt::Debug for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.n)).finish()
    }
}

impl fmt::Display for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.data.chunks(self.n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.4}")).collect();
            writeln!(f, "[{}]", cells.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixJson {
    n: usize,
    entries: Vec<Vec<f64>>,
}

impl Serialize for SquareMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixJson {
            n: self.n,
            entries: self.rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SquareMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = MatrixJson::deserialize(d)?;
        if raw.entries.len() != raw.n {
            return Err(serde::de::Error::custom(format!(
                "\"n\" is {} but {} rows were given",
                raw.n,
                raw.entries.len()
            )));
        }
        SquareMatrix::from_rows(&raw.entries).map_err(serde::de::Error::custom)
    }
}

/// One failed compartmental condition. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    PositiveColumnSum { col: usize, sum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub n: usize,
    pub entries: Vec<Vec<f64>>,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| match v {
                Violation::NegativeOffDiagonal { row, col, value } => {
                    format!("entry ({row}, {col}) = {value} < 0")
                }
                Violation::PositiveColumnSum { col, sum } => {
                    format!("column {col} sum = {sum} > 0")
                }
            })
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// A Metzler matrix with nonpositive column sums.
#[derive(Clone, PartialEq, Serialize)]
pub struct CompartmentalMatrix {
    #[serde(flatten)]
    base: SquareMatrix,
    #[serde(skip)]
    colsums: Vec<f64>,
}

impl fmt::Debug for CompartmentalMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.base.fmt(f)
    }
}

impl<'de> Deserialize<'de> for CompartmentalMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = SquareMatrix::deserialize(d)?;
        validate_compartmental(m, DEFAULT_VALIDATION_TOL).map_err(serde::de::Error::custom)
    }
}

impl CompartmentalMatrix {
    /// Shorthand for [`validate_compartmental`] on row data with exact checks.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        validate_compartmental(SquareMatrix::from_rows(rows)?, 0.0)
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            base: SquareMatrix::zeros(n),
            colsums: vec![0.0; n],
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.base.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.base.get(i, j)
    }

    pub fn matrix(&self) -> &SquareMatrix {
        &self.base
    }

    pub fn into_matrix(self) -> SquareMatrix {
        self.base
    }

    pub fn column_sums(&self) -> &[f64] {
        &self.colsums
    }

    /// Sum of two compartmental matrices (the class is a convex cone). Rounding
/// that pushes a column sum just above zero is clamped.
    pub fn add(&self, other: &CompartmentalMatrix) -> Result<CompartmentalMatrix> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: other.n(),
            });
        }
        validate_compartmental(self.base.add(&other.base), DEFAULT_VALIDATION_TOL)
    }
}

impl Index<(usize, usize)> for CompartmentalMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.base[idx]
    }
}

/// Lower the diagonal entry of column `j` until its exact column sum is `<= 0`.
fn force_nonpositive_column(m: &mut SquareMatrix, j: usize) -> f64 {
    let mut sum = m.column_sum(j);
    if sum > 0.0 {
        let off = exact_sum((0..m.n).filter(|&i| i != j).map(|i| m.get(i, j)));
        m.data[j * m.n + j] = -off;
        sum = m.column_sum(j);
        while sum > 0.0 {
            let d = m.get(j, j);
            m.data[j * m.n + j] = d.next_down();
            sum = m.column_sum(j);
        }
    }
    sum
}

/// Accept `m` as compartmental if every off-diagonal entry is `>= -tol` and
/// every column sum is `<= tol`. Entries inside the tolerance band are clamped
/// (off-diagonals to 0, the diagonal lowered until the column sum is `<= 0`).
pub fn validate_compartmental(m: SquareMatrix, tol: f64) -> Result<CompartmentalMatrix> {
    if !(tol >= 0.0 && tol.is_finite()) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be finite and >= 0")));
    }
    let n = m.n;
    let mut violations = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = m.get(i, j);
            if i != j && v < -tol {
                violations.push(Violation::NegativeOffDiagonal {
                    row: i + 1,
                    col: j + 1,
                    value: v,
                });
            }
        }
    }
    for j in 0..n {
        let s = m.column_sum(j);
        if s > tol {
            violations.push(Violation::PositiveColumnSum { col: j + 1, sum: s });
        }
    }
    if !violations.is_empty() {
        return Err(Error::NotCompartmental(ViolationReport {
            n,
            entries: m.rows(),
            violations,
        }));
    }
    let mut m = m;
    for i in 0..n {
        for j in 0..n {
            if i != j && m.get(i, j) < 0.0 {
                m.data[i * n + j] = 0.0;
            }
        }
    }
    let colsums = (0..n).map(|j| force_nonpositive_column(&mut m, j)).collect();
    Ok(CompartmentalMatrix { base: m, colsums })
}

/// Outflow and inter-compartment flow coefficients of a compartmental matrix.
///
/// `f[j][i]` is the coefficient of the flow from compartment `i` into `j`;
/// the diagonal of `f` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub f0: Vec<f64>,
    pub f: Vec<Vec<f64>>,
}

impl FlowParams {
    /// Rebuild `F` with `F[j][i] = f[j][i]` and `F[i][i] = -f0[i] - sum_j f[j][i]`.
    pub fn to_matrix(&self) -> Result<CompartmentalMatrix> {
        let n = self.f0.len();
        if self.f.len() != n || self.f.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("flow coefficient table must be n x n".into()));
        }
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    m.set(j, i, self.f[j][i]);
                }
            }
            let diag = -exact_sum(
                std::iter::once(self.f0[i]).chain((0..n).filter(|&j| j != i).map(|j| self.f[j][i])),
            );
            m.set(i, i, diag);
        }
        validate_compartmental(m, 0.0)
    }
}

pub fn to_flow_params(f: &CompartmentalMatrix) -> FlowParams {
    let n = f.n();
    let f0 = f.column_sums().iter().map(|s| -s).collect();
    let mut flows = vec![vec![0.0; n]; n];
    for (j, row) in flows.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = f.get(j, i);
            }
        }
    }
    FlowParams { f0, f: flows }
}

/// Bijection of `{0..n-1}`. Serialized 1-based, as `r(1), ..., r(n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(Error::InvalidPermutation("empty".into()));
        }
        let mut seen = vec![false; n];
        for &k in &map {
            if k >= n {
                return Err(Error::InvalidPermutation(format!("image {} out of range 1..={n}", k + 1)));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidPermutation(format!("image {} repeated", k + 1)));
            }
        }
        Ok(Self(map))
    }

    pub fn from_one_based(map: &[usize]) -> Result<Self> {
        if map.contains(&0) {
            return Err(Error::InvalidPermutation("entries must be 1-based".into()));
        }
        Self::new(map.iter().map(|k| k - 1).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|k| k + 1).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &k)| i == k)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &k) in self.0.iter().enumerate() {
            inv[k] = i;
        }
        Permutation(inv)
    }

    /// `i -> self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.len(), other.len());
        Permutation(other.0.iter().map(|&k| self.0[k]).collect())
    }

    /// `P[i][k] = 1` iff `k = r(i)`.
    pub fn matrix(&self) -> SquareMatrix {
        let n = self.len();
        let mut p = SquareMatrix::zeros(n);
        for (i, &k) in self.0.iter().enumerate() {
            p.set(i, k, 1.0);
        }
        p
    }

    /// `(P M P^-1)[i][j] = M[r(i)][r(j)]` for any square matrix.
    pub fn conjugate(&self, m: &SquareMatrix) -> SquareMatrix {
        let n = m.n;
        assert_eq!(n, self.len());
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = m.get(self.0[i], self.0[j]);
            }
        }
        out
    }
}

impl Serialize for Permutation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_one_based().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Permutation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        Permutation::from_one_based(&v).map_err(serde::de::Error::custom)
    }
}

/// `P F P^-1` with `P` built from `r`; the result is compartmental again.
pub fn conjugate_by_permutation(f: &CompartmentalMatrix, r: &Permutation) -> Result<CompartmentalMatrix> {
    if r.len() != f.n() {
        return Err(Error::InvalidPermutation(format!(
            "permutation of {} elements applied to a {}x{} matrix",
            r.len(),
            f.n(),
            f.n()
        )));
    }
    validate_compartmental(r.conjugate(&f.base), 0.0)
}

/// LU factorization with partial pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct LuDecomposition {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
    sign: f64,
    norm_1: f64,
}

impl LuDecomposition {
    pub fn new(a: &SquareMatrix) -> Self {
        let n = a.n;
        let mut lu = a.data.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&x, &y| lu[x * n + k].abs().total_cmp(&lu[y * n + k].abs()))
                .unwrap_or(k);
            if p != k {
                for j in 0..n {
                    lu.swap(p * n + j, k * n + j);
                }
                piv.swap(p, k);
                sign = -sign;
            }
            let d = lu[k * n + k];
            if d == 0.0 {
                continue;
            }
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / d;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        Self {
            n,
            lu,
            piv,
            sign,
            norm_1: a.norm_1(),
        }
    }

    pub fn determinant(&self) -> f64 {
        (0..self.n).fold(self.sign, |d, k| d * self.lu[k * self.n + k])
    }

    fn has_zero_pivot(&self) -> bool {
        (0..self.n).any(|k| self.lu[k * self.n + k] == 0.0)
    }

    /// Solve `A x = b`; no singularity check.
    fn solve_unchecked(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// Solve `A^T x = b`; no singularity check.
    fn solve_transpose_unchecked(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T y = z, x = P^T y.
        let mut z = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                z[i] -= self.lu[k * n + i] * z[k];
            }
            z[i] /= self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                z[i] -= self.lu[k * n + i] * z[k];
            }
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.piv.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// Reciprocal 1-norm condition number, with `||A^-1||_1` from Hager's
    /// estimator.
    pub fn rcond(&self) -> f64 {
        if self.has_zero_pivot() || self.norm_1 == 0.0 {
            return 0.0;
        }
        let n = self.n;
        let mut x = vec![1.0 / n as f64; n];
        let mut estimate = 0.0;
        for _ in 0..5 {
            let y = self.solve_unchecked(&x);
            let norm_y: f64 = y.iter().map(|v| v.abs()).sum();
            if !norm_y.is_finite() {
                return 0.0;
            }
            if norm_y <= estimate {
                break;
            }
            estimate = norm_y;
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_transpose_unchecked(&xi);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .map(|(j, v)| (j, v.abs()))
                .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        let rc = 1.0 / (self.norm_1 * estimate);
        if rc.is_finite() {
            rc
        } else {
            0.0
        }
    }

    fn checked(&self, rcond_min: f64) -> Result<()> {
        let rc = self.rcond();
        if rc < rcond_min {
            Err(Error::Singular { rcond: rc })
        } else {
            Ok(())
        }
    }

    pub fn solve(&self, b: &[f64], rcond_min: f64) -> Result<Vec<f64>> {
        self.checked(rcond_min)?;
        Ok(self.solve_unchecked(b))
    }

    pub fn solve_transpose(&self, b: &[f64], rcond_min: f64) -> Result<Vec<f64>> {
        self.checked(rcond_min)?;
        Ok(self.solve_transpose_unchecked(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f1() -> CompartmentalMatrix {
        CompartmentalMatrix::from_rows(&[vec![-1.0, 0.0], vec![1.0, -1.0]]).unwrap()
    }

    fn f2() -> CompartmentalMatrix {
        CompartmentalMatrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]).unwrap()
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let v = [0.1, 0.2, 0.3, -0.6, 1e16, 1.0, -1e16];
        let mut w = v;
        w.reverse();
        assert_eq!(exact_sum(v), exact_sum(w));
        assert_eq!(exact_sum([0.1, 0.2, -0.3]), 2.7755575615628914e-17);
        assert_eq!(exact_sum([]), 0.0);
    }

    #[test]
    fn accepts_worked_matrices() {
        assert!(validate_compartmental(f1().into_matrix(), 0.0).is_ok());
        assert!(validate_compartmental(SquareMatrix::zeros(2), 0.0).is_ok());
    }

    #[test]
    fn rejects_positive_column_sum() {
        let m = SquareMatrix::from_rows(&[vec![-1.0, 2.0], vec![1.0, -1.0]]).unwrap();
        match validate_compartmental(m, 1e-12) {
            Err(Error::NotCompartmental(rep)) => {
                assert_eq!(rep.violations, vec![Violation::PositiveColumnSum { col: 2, sum: 1.0 }]);
                let json = serde_json::to_value(&rep).unwrap();
                assert_eq!(json["n"], 2);
                assert_eq!(json["violations"][0]["kind"], "positive_column_sum");
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_off_diagonal_and_non_finite() {
        let m = SquareMatrix::from_rows(&[vec![-1.0, -0.5], vec![1.0, -1.0]]).unwrap();
        let err = validate_compartmental(m, 0.0).unwrap_err();
        assert!(err.to_string().contains("(1, 2)"));
        let err = SquareMatrix::from_rows(&[vec![f64::NAN, 0.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 1, col: 1, .. }));
    }

    #[test]
    fn clamps_inside_tolerance() {
        let m = SquareMatrix::from_rows(&[vec![-1.0, -1e-14], vec![1.0 + 1e-13, 0.0]]).unwrap();
        let c = validate_compartmental(m, 1e-12).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert!(c.column_sums().iter().all(|&s| s <= 0.0));
        assert_eq!(c.column_sum_check(), c.column_sums());
    }

    impl CompartmentalMatrix {
        fn column_sum_check(&self) -> Vec<f64> {
            self.base.column_sums()
        }
    }

    #[test]
    fn flow_params_of_worked_matrices() {
        let p = to_flow_params(&f1());
        assert_eq!(p.f0, vec![0.0, 1.0]);
        assert_eq!(p.f[1][0], 1.0);
        assert_eq!(p.f[0][1], 0.0);
        let p = to_flow_params(&f2());
        assert_eq!(p.f0, vec![1.0, 0.0]);
        assert_eq!(p.f[0][1], 1.0);
        assert_eq!(p.f[1][0], 0.0);
        let p = to_flow_params(&CompartmentalMatrix::zeros(3));
        assert!(p.f0.iter().chain(p.f.iter().flatten()).all(|&v| v == 0.0));
    }

    #[test]
    fn conjugation_maps_f2_to_f1() {
        let r = Permutation::from_one_based(&[2, 1]).unwrap();
        assert_eq!(conjugate_by_permutation(&f2(), &r).unwrap(), f1());
        let id = Permutation::identity(2);
        assert_eq!(conjugate_by_permutation(&f2(), &id).unwrap(), f2());
        // Matches P F P^T computed by matrix products.
        let p = r.matrix();
        assert_eq!(p.matmul(f2().matrix()).matmul(&p.transpose()), *f1().matrix());
    }

    #[test]
    fn invalid_permutations_are_rejected() {
        assert!(Permutation::from_one_based(&[1, 1]).is_err());
        assert!(Permutation::from_one_based(&[1, 3]).is_err());
        let r = Permutation::identity(3);
        assert!(conjugate_by_permutation(&f1(), &r).is_err());
    }

    #[test]
    fn lu_solves_and_detects_singularity() {
        let a = SquareMatrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]]).unwrap();
        let lu = LuDecomposition::new(&a);
        let x = lu.solve(&[1.0, 2.0, 3.0], 1e-12).unwrap();
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ri - bi).abs() < 1e-14);
        }
        let y = lu.solve_transpose(&[1.0, 0.0, -1.0], 1e-12).unwrap();
        let r = a.vec_mul(&y);
        for (ri, bi) in r.iter().zip([1.0, 0.0, -1.0]) {
            assert!((ri - bi).abs() < 1e-14);
        }
        assert!((lu.determinant() - 18.0).abs() < 1e-12);
        let s = SquareMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(LuDecomposition::new(&s).solve(&[1.0, 1.0], 1e-12), Err(Error::Singular { .. })));
    }

    #[test]
    fn rcond_matches_exact_inverse_norm() {
        let a = SquareMatrix::from_rows(&[vec![-1.0, 0.0], vec![1.0, -1.0]]).unwrap();
        // inverse = [[-1, 0], [-1, -1]], ||A||_1 = 2, ||A^-1||_1 = 2
        assert!((LuDecomposition::new(&a).rcond() - 0.25).abs() < 1e-15);
    }

    fn dyadic_compartmental(n: usize) -> impl Strategy<Value = CompartmentalMatrix> {
        (
            proptest::collection::vec(0u32..64, n * n),
            proptest::collection::vec(0u32..64, n),
        )
            .prop_map(move |(off, out)| {
                let mut m = SquareMatrix::zeros(n);
                for i in 0..n {
                    let mut col = out[i] as f64 / 32.0;
                    for j in 0..n {
                        if i != j {
                            let v = off[j * n + i] as f64 / 32.0;
                            m.set(j, i, v);
                            col += v;
                        }
                    }
                    m.set(i, i, -col);
                }
                validate_compartmental(m, 0.0).unwrap()
            })
    }

    fn permutation(n: usize) -> impl Strategy<Value = Permutation> {
        Just((0..n).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_map(|v| Permutation::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn flow_params_round_trip_exact(f in dyadic_compartmental(5)) {
            prop_assert_eq!(to_flow_params(&f).to_matrix().unwrap(), f);
        }

        #[test]
        fn conjugation_is_a_group_action(
            f in dyadic_compartmental(4),
            r in permutation(4),
            s in permutation(4),
        ) {
            let once = conjugate_by_permutation(&conjugate_by_permutation(&f, &r).unwrap(), &s).unwrap();
            prop_assert_eq!(&once, &conjugate_by_permutation(&f, &r.compose(&s)).unwrap());
            let back = conjugate_by_permutation(&conjugate_by_permutation(&f, &r).unwrap(), &r.inverse()).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert!(once.matrix().is_metzler());
            prop_assert!(once.column_sums().iter().all(|&c| c <= 0.0));
        }

        #[test]
        fn conjugation_permutes_column_sums(
            raw in proptest::collection::vec(0.0f64..1.0, 16),
            out in proptest::collection::vec(0.0f64..1.0, 4),
            r in permutation(4),
        ) {
            let n = 4;
            let mut m = SquareMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        m.set(j, i, raw[j * n + i]);
                    }
                }
                let off: f64 = (0..n).filter(|&j| j != i).map(|j| raw[j * n + i]).sum();
                m.set(i, i, -off - out[i]);
            }
            let f = validate_compartmental(m, 1e-12).unwrap();
            let a = conjugate_by_permutation(&f, &r).unwrap();
            // column i of A is column r(i) of F, rows permuted; exact sums agree.
            let mut lhs = a.column_sums().to_vec();
            let mut rhs: Vec<f64> = (0..n).map(|i| f.column_sums()[r.apply(i)]).collect();
            prop_assert_eq!(&lhs, &rhs);
            lhs.sort_by(f64::total_cmp);
            rhs.sort_by(f64::total_cmp);
            let mut orig = f.column_sums().to_vec();
            orig.sort_by(f64::total_cmp);
            prop_assert_eq!(lhs, orig);
        }
    }
}

//! Dense row-major matrices, embedding batches and the small set of numeric
//! primitives everything else is built on.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed left-to-right
//! order, so results are bit-identical across runs and threads.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose norm is at or below this are rejected by [`l2_normalize_rows`].
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyInput);
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput)?.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {first}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), first, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimMismatch(format!(
                "row dot products of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimMismatch(format!(
                "transposed matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adding {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> Option<f64> {
        (self.shape() == other.shape()).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
        })
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A batch of embeddings, one per row. When `normalized` is set every row has
/// unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Matrix,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps rows that are already unit length; fails if any row is off by
    /// more than 1e-9.
    pub fn from_unit_rows(matrix: Matrix) -> Result<Self> {
        for i in 0..matrix.rows() {
            let n = norm(matrix.row(i));
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self {
            matrix,
            normalized: true,
        })
    }

    /// Wraps arbitrary rows without normalizing. Losses accept such batches;
    /// the finite-difference checks perturb embeddings off the unit sphere.
    pub fn from_raw(matrix: Matrix) -> Self {
        Self {
            matrix,
            normalized: false,
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_rows(idx),
            normalized: self.normalized,
        }
    }
}

impl Deref for EmbeddingBatch {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.matrix
    }
}

/// Pairwise cosine similarities between two normalized batches, clamped to
/// `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Matrix);

impl SimilarityMatrix {
    /// Wraps a matrix of similarities, clamping entries into `[-1, 1]`.
    pub fn from_matrix(m: Matrix) -> Self {
        Self(m.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

impl Deref for SimilarityMatrix {
    type Target = Matrix;

    fn deref(&self) -> &Matrix {
        &self.0
    }
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<EmbeddingBatch> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n <= ZERO_NORM_EPS {
            return Err(Error::ZeroRow(i));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(EmbeddingBatch {
        matrix: out,
        normalized: true,
    })
}

pub fn cosine_similarity_matrix(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!(
            "embedding dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(SimilarityMatrix::from_matrix(a.matrix.matmul_t(&b.matrix)?))
}

/// `log Σ exp(v_i)` with a max shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    Ok(logsumexp_unchecked(v))
}

/// [`logsumexp`] without input validation, for hot loops over values that
/// are known finite and non-empty.
#[inline]
pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation(i));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst-case comparison of an analytic gradient against a numeric one.
///
/// A coordinate passes when its relative error is below `rel_tol`, or when the
/// gradient there is tiny (`< small`) and the absolute error is below
/// `abs_tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientComparison {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

pub fn compare_gradients(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    small: f64,
) -> GradientComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut out = GradientComparison {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: None,
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        out.max_abs_err = out.max_abs_err.max(abs);
        let ok = if scale < small {
            abs < abs_tol
        } else {
            rel < rel_tol
        };
        if scale >= small && rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = Some(i);
        }
        if !ok {
            out.passed = false;
            out.worst_index.get_or_insert(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let z = l2_normalize_rows(&m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(z.row(0), &[0.6, 0.8]);
        assert!(z.is_normalized());
    }

    #[test]
    fn unit_row_unchanged() {
        let z = l2_normalize_rows(&m(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(z.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn zero_row_rejected() {
        assert_eq!(
            l2_normalize_rows(&m(&[&[0.0, 0.0]])).unwrap_err(),
            Error::ZeroRow(0)
        );
        assert_eq!(
            l2_normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 1e-13]])).unwrap_err(),
            Error::ZeroRow(1)
        );
    }

    #[test]
    fn cosine_of_orthonormal_rows() {
        let a = l2_normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let s = cosine_similarity_matrix(&a, &a).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);

        let single = l2_normalize_rows(&m(&[&[0.3, -0.7]])).unwrap();
        let s = cosine_similarity_matrix(&single, &single).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_sixty_degrees() {
        let a = l2_normalize_rows(&m(&[&[1.0, 0.0]])).unwrap();
        let t = 60f64.to_radians();
        let b = l2_normalize_rows(&m(&[&[t.cos(), t.sin()]])).unwrap();
        let s = cosine_similarity_matrix(&a, &b).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_dim_mismatch() {
        let a = l2_normalize_rows(&m(&[&[1.0, 0.0]])).unwrap();
        let b = l2_normalize_rows(&m(&[&[1.0, 0.0, 0.0]])).unwrap();
        assert!(matches!(
            cosine_similarity_matrix(&a, &b),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn similarity_is_clamped() {
        let s = SimilarityMatrix::from_matrix(m(&[&[1.0 + 1e-10, -1.0 - 1e-10]]));
        assert_eq!(s.data(), &[1.0, -1.0]);
    }

    #[test]
    fn logsumexp_values() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[-3.25]).unwrap(), -3.25);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let neg = logsumexp(&[-1e4, -1e4]).unwrap();
        assert!((neg - (-1e4 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(logsumexp(&[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn fd_square() {
        let g = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_constant() {
        let g = finite_difference_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn fd_quadratic_form() {
        let a = [[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * a[i][j] * x[j];
                }
            }
            s
        };
        let x = [0.3, -1.2, 0.7];
        let g = finite_difference_gradient(f, &x, 1e-5).unwrap();
        for i in 0..3 {
            let expect: f64 = 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>();
            assert!((g[i] - expect).abs() < 1e-5, "{i}: {} vs {expect}", g[i]);
        }
    }

    #[test]
    fn fd_reports_non_finite() {
        let err = finite_difference_gradient(
            |x| if x[1] > 1.0 { f64::NAN } else { 0.0 },
            &[0.0, 1.0],
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFiniteEvaluation(1));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 4.0]]);
        let b = m(&[&[0.5, -2.0, 1.0], &[3.0, 1.0, -1.0]]);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert_eq!(direct, a.matmul_t(&b).unwrap());
        let direct = a.transpose().matmul(&b).unwrap();
        assert_eq!(direct, a.t_matmul(&b).unwrap());
    }

    #[test]
    fn rejects_non_finite_construction() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }
}

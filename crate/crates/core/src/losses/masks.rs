//! Positive-set construction from intra-modal similarities.
//!
//! `mask[i][j] = H(S[i][j] - λ)` with `H(x) = 1` for `x >= 0`. Masks are
//! plain constants; nothing downstream differentiates through them.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SimilarityMatrix};

/// Binary `n x n` positive relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveMask {
    n: usize,
    bits: Vec<bool>,
    lambda_used: Option<OrderedLambda>,
}

/// λ stored as bits so the mask stays `Eq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct OrderedLambda(u64);

impl PositiveMask {
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self {
            n,
            bits,
            lambda_used: None,
        }
    }

    pub fn all_ones(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
            lambda_used: None,
        }
    }

    /// Builds a mask from a 0/1 matrix. Other values are rejected.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::ShapeMismatch(format!(
                "mask must be square, got {:?}",
                m.shape()
            )));
        }
        let mut bits = Vec::with_capacity(m.data().len());
        for &v in m.data() {
            match v {
                1.0 => bits.push(true),
                0.0 => bits.push(false),
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "mask entry {other} is not 0 or 1"
                    )))
                }
            }
        }
        Ok(Self {
            n: m.rows(),
            bits,
            lambda_used: None,
        })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self {
            n,
            bits,
            lambda_used: None,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Threshold the mask was built with, if it came from similarities.
    pub fn lambda_used(&self) -> Option<f64> {
        self.lambda_used.map(|l| f64::from_bits(l.0))
    }

    pub fn mean_positives(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.n as f64
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Matrix::new(self.n, self.n, data).expect("mask is non-empty")
    }

    /// Every positive of `other` is also a positive here.
    pub fn is_superset_of(&self, other: &PositiveMask) -> bool {
        self.n == other.n && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// First anchor with no positives.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.n).find(|&i| self.row_count(i) == 0)
    }

    /// Applies the same permutation to rows and columns:
    /// `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::from_fn(self.n, |i, j| self.get(perm[i], perm[j]));
        out.lambda_used = self.lambda_used;
        out
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "lambda {lambda} outside [-1, 1]"
        )));
    }
    Ok(())
}

fn check_square(s: &Matrix, what: &str) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {:?}, expected square",
            s.shape()
        )));
    }
    Ok(())
}

/// Thresholds one similarity matrix. The diagonal is always positive: a unit
/// vector's self-similarity is exactly 1, and rounding in the dot product must
/// not drop an anchor from its own set.
fn threshold(s: &Matrix, lambda: f64) -> PositiveMask {
    let n = s.rows();
    let mut mask = PositiveMask::from_fn(n, |i, j| i == j || s.get(i, j) - lambda >= 0.0);
    mask.lambda_used = Some(OrderedLambda(lambda.to_bits()));
    mask
}

/// Image and text positive masks from intra-modal similarities.
pub fn positive_masks(
    s_ii: &SimilarityMatrix,
    s_tt: &SimilarityMatrix,
    lambda: f64,
) -> Result<(PositiveMask, PositiveMask)> {
    check_lambda(lambda)?;
    check_square(s_ii, "image similarity")?;
    check_square(s_tt, "text similarity")?;
    if s_ii.shape() != s_tt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image similarity {:?} vs text similarity {:?}",
            s_ii.shape(),
            s_tt.shape()
        )));
    }
    Ok((threshold(s_ii, lambda), threshold(s_tt, lambda)))
}

/// Positive mask for a single similarity matrix.
pub fn positive_mask(s: &SimilarityMatrix, lambda: f64) -> Result<PositiveMask> {
    check_lambda(lambda)?;
    check_square(s, "similarity")?;
    Ok(threshold(s, lambda))
}

/// Joint image positives across two views: `H(max(S11, S22) - λ)`.
pub fn joint_positive_mask(
    s_11: &SimilarityMatrix,
    s_22: &SimilarityMatrix,
    lambda: f64,
) -> Result<PositiveMask> {
    check_lambda(lambda)?;
    check_square(s_11, "view-1 similarity")?;
    if s_11.shape() != s_22.shape() {
        return Err(Error::ShapeMismatch(format!(
            "view similarities {:?} and {:?}",
            s_11.shape(),
            s_22.shape()
        )));
    }
    let n = s_11.rows();
    let mut max = Matrix::zeros(n, n);
    for ((m, a), b) in max.data_mut().iter_mut().zip(s_11.data()).zip(s_22.data()) {
        *m = a.max(*b);
    }
    Ok(threshold(&max, lambda))
}

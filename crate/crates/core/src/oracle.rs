//! Brute-force reference values for every loss.
//!
//! These are literal per-anchor / per-positive loops over plain exponentials.
//! They share no code with [`crate::losses`]: no log-sum-exp, no matrix
//! products, their own dot products and their own projection-head forward
//! pass. Exponents stay below `exp(1/0.07)` at the scales they are used at.

use crate::encoders::ProjectionHead;
use crate::error::{Error, Result};
use crate::losses::PositiveMask;
use crate::numerics::EmbeddingBatch;

fn sim(a: &EmbeddingBatch, i: usize, b: &EmbeddingBatch, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..a.cols() {
        s += a.get(i, k) * b.get(j, k);
    }
    s
}

fn exp_sim(a: &EmbeddingBatch, i: usize, b: &EmbeddingBatch, j: usize, tau: f64) -> f64 {
    (sim(a, i, b, j) / tau).exp()
}

pub fn oracle_info_nce(z_i: &EmbeddingBatch, z_t: &EmbeddingBatch, tau: f64) -> f64 {
    let n = z_i.rows();
    let mut img_to_txt = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for j in 0..n {
            den += exp_sim(z_i, i, z_t, j, tau);
        }
        img_to_txt += (exp_sim(z_i, i, z_t, i, tau) / den).ln();
    }
    // E^{TI} is the transpose of E^{IT}.
    let mut txt_to_img = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for j in 0..n {
            den += exp_sim(z_i, j, z_t, i, tau);
        }
        txt_to_img += (exp_sim(z_i, i, z_t, i, tau) / den).ln();
    }
    -img_to_txt / n as f64 - txt_to_img / n as f64
}

/// One direction: anchors from `anchor`, cross terms against `other`, intra
/// terms within `anchor`.
fn simcon_direction(
    anchor: &EmbeddingBatch,
    other: &EmbeddingBatch,
    positives: &PositiveMask,
    tau: f64,
) -> Result<f64> {
    let n = anchor.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut den = 0.0;
        for j in 0..n {
            den += exp_sim(anchor, i, other, j, tau);
        }
        for j in 0..n {
            den += exp_sim(anchor, i, anchor, j, tau);
        }
        let mut count = 0;
        let mut acc = 0.0;
        for p in 0..n {
            if positives.get(i, p) {
                count += 1;
                let num = exp_sim(anchor, i, other, p, tau) + exp_sim(anchor, i, anchor, p, tau);
                acc += (num / den).ln();
            }
        }
        if count == 0 {
            return Err(Error::EmptyPositiveSet(i));
        }
        total += acc / count as f64;
    }
    Ok(-total / n as f64)
}

pub fn oracle_simcon(
    z_i: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    p_i: &PositiveMask,
    p_t: &PositiveMask,
    tau: f64,
) -> Result<f64> {
    Ok(simcon_direction(z_i, z_t, p_i, tau)? + simcon_direction(z_t, z_i, p_t, tau)?)
}

/// `H(S - λ)` over self-similarities, with the anchor itself always positive.
/// Positive set of every row: itself plus all rows at clamped similarity
/// `>= lambda`.
pub fn oracle_positive_mask(z: &EmbeddingBatch, lambda: f64) -> PositiveMask {
    PositiveMask::from_fn(z.rows(), |i, j| {
        i == j || sim(z, i, z, j).clamp(-1.0, 1.0) >= lambda
    })
}

fn oracle_joint_mask(z1: &EmbeddingBatch, z2: &EmbeddingBatch, lambda: f64) -> PositiveMask {
    PositiveMask::from_fn(z1.rows(), |i, j| {
        let s1 = sim(z1, i, z1, j).clamp(-1.0, 1.0);
        let s2 = sim(z2, i, z2, j).clamp(-1.0, 1.0);
        i == j || s1.max(s2) >= lambda
    })
}

/// Two-view loss; `joint` selects joint image positives versus one mask per
/// view.
pub fn oracle_mv_simcon_views(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    tau: f64,
    lambda: f64,
    joint: bool,
) -> Result<f64> {
    let p_t = oracle_positive_mask(z_t, lambda);
    let (p_1, p_2) = if joint {
        let j = oracle_joint_mask(z_i1, z_i2, lambda);
        (j.clone(), j)
    } else {
        (
            oracle_positive_mask(z_i1, lambda),
            oracle_positive_mask(z_i2, lambda),
        )
    };
    Ok(simcon_direction(z_i1, z_t, &p_1, tau)?
        + simcon_direction(z_i2, z_t, &p_2, tau)?
        + simcon_direction(z_t, z_i1, &p_t, tau)?
        + simcon_direction(z_t, z_i2, &p_t, tau)?)
}

pub fn oracle_mv_simcon(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    oracle_mv_simcon_views(z_i1, z_i2, z_t, tau, lambda, true)
}

/// Head output for one row, normalized: affine layers with `tanh` between.
fn head_forward(head: &ProjectionHead, x: &[f64]) -> Vec<f64> {
    let layers = head.mlp().layers();
    let mut h = x.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        let mut y = vec![0.0; layer.fan_out()];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                acc += hi * layer.weight.get(i, o);
            }
            *yo = if k + 1 < layers.len() {
                acc.tanh()
            } else {
                acc
            };
        }
        h = y;
    }
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter().map(|v| v / norm).collect()
}

pub fn oracle_ncs(z_i1: &EmbeddingBatch, z_i2: &EmbeddingBatch, head: &ProjectionHead) -> f64 {
    let n = z_i1.rows();
    let mut total = 0.0;
    for i in 0..n {
        let p1 = head_forward(head, z_i1.row(i));
        let p2 = head_forward(head, z_i2.row(i));
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..z_i1.cols() {
            a += p1[k] * z_i2.get(i, k);
            b += p2[k] * z_i1.get(i, k);
        }
        total += 0.5 * a + 0.5 * b;
    }
    -total / n as f64
}

pub fn oracle_total(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    tau: f64,
    lambda: f64,
    head: &ProjectionHead,
) -> Result<f64> {
    Ok(oracle_mv_simcon(z_i1, z_i2, z_t, tau, lambda)? + oracle_ncs(z_i1, z_i2, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize_rows, Matrix};

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        l2_normalize_rows(&Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_anchor_zero() {
        let a = batch(&[&[1.0, 0.5]]);
        let b = batch(&[&[-0.2, 0.5]]);
        assert!(oracle_info_nce(&a, &b, 0.07).abs() < 1e-15);
        let id = PositiveMask::identity(1);
        assert!(oracle_simcon(&a, &b, &id, &id, 0.07).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_embeddings() {
        let r: &[f64] = &[0.5, 0.5, -0.1];
        let z = batch(&[r, r, r, r]);
        assert!((oracle_info_nce(&z, &z, 0.07) - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn simcon_two_by_two_by_hand() {
        // z_i = {e1, e2}, z_t = {(e1+e2)/√2, e2}, identity masks, τ = 0.5.
        let zi = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let zt = batch(&[&[1.0, 1.0], &[0.0, 1.0]]);
        let tau = 0.5;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let e = |s: f64| (s / tau).exp();
        // image anchors: S_it rows [r, 0], [r, 1]; S_ii = I
        let img0 = ((e(r) + e(1.0)) / (e(r) + e(0.0) + e(1.0) + e(0.0))).ln();
        let img1 = ((e(1.0) + e(1.0)) / (e(r) + e(1.0) + e(0.0) + e(1.0))).ln();
        // text anchors: S_ti rows [r, r], [0, 1]; S_tt = [[1, r], [r, 1]]
        let txt0 = ((e(r) + e(1.0)) / (e(r) + e(r) + e(1.0) + e(r))).ln();
        let txt1 = ((e(1.0) + e(1.0)) / (e(0.0) + e(1.0) + e(r) + e(1.0))).ln();
        let expect = -(img0 + img1) / 2.0 - (txt0 + txt1) / 2.0;
        let id = PositiveMask::identity(2);
        let got = oracle_simcon(&zi, &zt, &id, &id, tau).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn equal_views_double() {
        let zi = batch(&[&[1.0, 0.2], &[0.9, 0.3], &[-1.0, 0.5]]);
        let zt = batch(&[&[0.8, 0.1], &[0.1, 1.0], &[-0.5, 0.2]]);
        let single_mask_i = oracle_positive_mask(&zi, 0.5);
        let mask_t = oracle_positive_mask(&zt, 0.5);
        let single = oracle_simcon(&zi, &zt, &single_mask_i, &mask_t, 0.1).unwrap();
        let mv = oracle_mv_simcon(&zi, &zi, &zt, 0.1, 0.5).unwrap();
        assert!((mv - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum() {
        let zi = batch(&[&[1.0, 0.2], &[0.9, 0.3]]);
        let zj = batch(&[&[1.0, 0.1], &[0.7, 0.3]]);
        let zt = batch(&[&[0.8, 0.1], &[0.1, 1.0]]);
        let head = ProjectionHead::new(1, 2, 4).unwrap();
        let total = oracle_total(&zi, &zj, &zt, 0.5, 0.5, &head).unwrap();
        let parts =
            oracle_mv_simcon(&zi, &zj, &zt, 0.5, 0.5).unwrap() + oracle_ncs(&zi, &zj, &head);
        assert_eq!(total, parts);
    }

    #[test]
    fn empty_positive_set() {
        let z = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let bad = PositiveMask::from_fn(2, |i, _| i == 0);
        let id = PositiveMask::identity(2);
        assert_eq!(
            oracle_simcon(&z, &z, &bad, &id, 0.1).unwrap_err(),
            Error::EmptyPositiveSet(1)
        );
    }
}

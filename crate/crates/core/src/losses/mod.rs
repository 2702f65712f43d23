//! Contrastive objectives with analytic gradients.
//!
//! Every loss returns a [`LossOutput`]: the scalar value, one gradient matrix
//! per embedding input (in argument order), the gradient w.r.t. the
//! temperature and, for losses with a projection head, the head gradients.
//!
//! Losses differentiate the raw dot products of their inputs. Callers that
//! feed normalized embeddings get gradients w.r.t. the normalized entries;
//! the encoder backward pass projects them onto the sphere's tangent space.

mod infonce;
mod masks;
mod ncs;
mod simcon;
mod total;

pub use infonce::info_nce;
pub use masks::{joint_positive_mask, positive_mask, positive_masks, PositiveMask};
pub(crate) use ncs::ncs_term;
pub use ncs::{ncs_loss, NcsSpec};
pub use simcon::{mv_simcon, mv_simcon_masks, mv_simcon_with_masks, simcon, IntraModal, MvMasks};
pub use total::{composite_loss, total_loss};

use crate::encoders::MlpGrads;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp_unchecked, EmbeddingBatch, Matrix};

/// Smallest temperature the optimizer may reach.
pub const TAU_MIN: f64 = 1e-3;
/// Largest temperature the optimizer may reach.
pub const TAU_MAX: f64 = 1.0;
/// Initial temperature.
pub const TAU_INIT: f64 = 0.07;

/// Softmax temperature. When learnable it is parameterized as
/// `tau = exp(-scale)`, with `scale` clamped so that `tau` stays inside
/// `[TAU_MIN, TAU_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    tau: f64,
    learnable: bool,
}

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self {
            tau,
            learnable: false,
        })
    }

    pub fn learnable(tau: f64) -> Result<Self> {
        let mut t = Self::new(tau.clamp(TAU_MIN, TAU_MAX))?;
        t.learnable = true;
        Ok(t)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    /// Unconstrained parameter `s` with `tau = exp(-s)`.
    pub fn scale(&self) -> f64 {
        -self.tau.ln()
    }

    /// Sets `tau = exp(-scale)`, clamped into `[TAU_MIN, TAU_MAX]`.
    pub fn set_scale(&mut self, scale: f64) {
        self.tau = (-scale).exp().clamp(TAU_MIN, TAU_MAX);
    }

    /// Chain rule from `dL/dtau` to `dL/dscale`.
    pub fn scale_gradient(&self, grad_tau: f64) -> f64 {
        -self.tau * grad_tau
    }
}

/// Side information reported next to a loss value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Named constituent values, e.g. per direction or per view.
    pub terms: Vec<(&'static str, f64)>,
    /// Mean positive-set size per image anchor.
    pub mean_positives_image: Option<f64>,
    /// Mean positive-set size per text anchor.
    pub mean_positives_text: Option<f64>,
    /// Mean share of an image anchor's positive numerator mass that comes from
    /// its own intra-modal term `exp(S_ii / tau)`.
    pub diagonal_numerator_share: Option<f64>,
}

impl Diagnostics {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
    pub grad_tau: f64,
    pub head_grads: Option<MlpGrads>,
    pub diagnostics: Diagnostics,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_tau.is_finite()
            && self.grads.iter().all(Matrix::is_finite)
            && self.head_grads.as_ref().is_none_or(|g| g.is_finite())
    }
}

pub(crate) fn check_pair(a: &EmbeddingBatch, b: &EmbeddingBatch, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    for z in [a, b] {
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("{what} embeddings")));
        }
    }
    Ok(())
}

pub(crate) fn check_mask(mask: &PositiveMask, n: usize, what: &str) -> Result<()> {
    if mask.size() != n {
        return Err(Error::ShapeMismatch(format!(
            "{what} mask is {0}x{0}, batch has {n} rows",
            mask.size()
        )));
    }
    if let Some(i) = mask.first_empty_row() {
        return Err(Error::EmptyPositiveSet(i));
    }
    Ok(())
}

/// One direction of a (similarity-aware) contrastive loss, averaged over
/// anchors.
pub(crate) struct Direction {
    pub value: f64,
    /// Gradient w.r.t. the cross-modal similarities (anchor rows).
    pub grad_cross: Matrix,
    /// Gradient w.r.t. the intra-modal similarities, when present.
    pub grad_intra: Option<Matrix>,
    pub mean_positives: f64,
    pub diagonal_share: Option<f64>,
}

/// For anchor `i` with positive set `P_i`:
///
/// ```text
/// L_i = lse_j(cross_ij/τ, intra_ij/τ) - 1/|P_i| Σ_{p∈P_i} lse(cross_ip/τ, intra_ip/τ)
/// ```
///
/// with the intra terms dropped when `intra` is `None`. With an identity mask
/// and no intra terms this is one InfoNCE direction.
pub(crate) fn contrastive_direction(
    cross: &Matrix,
    intra: Option<&Matrix>,
    mask: &PositiveMask,
    tau: f64,
) -> Direction {
    let n = cross.rows();
    let inv_b = 1.0 / n as f64;
    let mut grad_cross = Matrix::zeros(n, n);
    let mut grad_intra = intra.map(|_| Matrix::zeros(n, n));
    let mut value = 0.0;
    let mut positives = 0usize;
    let mut diag_share = 0.0;
    let mut logits = Vec::with_capacity(2 * n);

    for i in 0..n {
        logits.clear();
        logits.extend(cross.row(i).iter().map(|s| s / tau));
        if let Some(intra) = intra {
            logits.extend(intra.row(i).iter().map(|s| s / tau));
        }
        let den = logsumexp_unchecked(&logits);

        let row_mask = mask.row(i);
        let count = row_mask.iter().filter(|&&b| b).count();
        positives += count;
        let inv_p = 1.0 / count as f64;

        let mut num_sum = 0.0;
        // log of the total positive numerator mass, for the diagonal share
        let mut num_mass_max = f64::NEG_INFINITY;
        let mut num_terms: Vec<f64> = Vec::with_capacity(count);
        let gc = grad_cross.row_mut(i);
        for j in 0..n {
            gc[j] = (logits[j] - den).exp();
        }
        if let Some(gi) = grad_intra.as_mut() {
            let gi = gi.row_mut(i);
            for j in 0..n {
                gi[j] = (logits[n + j] - den).exp();
            }
        }
        for (p, _) in row_mask.iter().enumerate().filter(|(_, &b)| b) {
            let a = logits[p];
            match intra {
                Some(_) => {
                    let c = logits[n + p];
                    let m = a.max(c);
                    let num = m + ((a - m).exp() + (c - m).exp()).ln();
                    num_sum += num;
                    num_terms.push(num);
                    num_mass_max = num_mass_max.max(num);
                    // share of the numerator going to the cross term
                    let w = (a - num).exp();
                    grad_cross.row_mut(i)[p] -= inv_p * w;
                    grad_intra.as_mut().unwrap().row_mut(i)[p] -= inv_p * (1.0 - w);
                }
                None => {
                    num_sum += a;
                    grad_cross.row_mut(i)[p] -= inv_p;
                }
            }
        }
        value += den - inv_p * num_sum;

        if intra.is_some() && row_mask[i] {
            let total = num_mass_max
                + num_terms
                    .iter()
                    .map(|t| (t - num_mass_max).exp())
                    .sum::<f64>()
                    .ln();
            diag_share += (logits[n + i] - total).exp();
        }
    }

    let to_similarity = inv_b / tau;
    grad_cross.scale(to_similarity);
    if let Some(g) = grad_intra.as_mut() {
        g.scale(to_similarity);
    }
    Direction {
        value: value * inv_b,
        grad_cross,
        grad_intra,
        mean_positives: positives as f64 * inv_b,
        diagonal_share: intra.map(|_| diag_share * inv_b),
    }
}

/// `dL/dtau = -(1/tau) Σ G ∘ S` for a gradient `G` w.r.t. similarities `S`
/// that enter the loss as `S / tau`.
pub(crate) fn tau_gradient(grad: &Matrix, sims: &Matrix, tau: f64) -> f64 {
    -grad
        .data()
        .iter()
        .zip(sims.data())
        .map(|(g, s)| g * s)
        .sum::<f64>()
        / tau
}

/// Accumulates the embedding gradients of `S = A Bᵀ` given `G = dL/dS`:
/// `dA += G B`, `dB += Gᵀ A`.
pub(crate) fn backprop_cross(
    g: &Matrix,
    a: &Matrix,
    b: &Matrix,
    grad_a: &mut Matrix,
    grad_b: &mut Matrix,
) {
    grad_a
        .add_assign(&g.matmul(b).expect("cross gradient shape"))
        .expect("grad shape");
    grad_b
        .add_assign(&g.t_matmul(a).expect("cross gradient shape"))
        .expect("grad shape");
}

/// Accumulates the gradient of `S = A Aᵀ` given `G = dL/dS`: `dA += (G + Gᵀ) A`.
pub(crate) fn backprop_gram(g: &Matrix, a: &Matrix, grad_a: &mut Matrix) {
    grad_a
        .add_assign(&g.matmul(a).expect("gram gradient shape"))
        .expect("grad shape");
    grad_a
        .add_assign(&g.t_matmul(a).expect("gram gradient shape"))
        .expect("grad shape");
}

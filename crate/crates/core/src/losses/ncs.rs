//! Symmetrized negative cosine similarity between two image views with a
//! stop-gradient on the target branch.

use super::{check_pair, Diagnostics, LossOutput};
use crate::encoders::{project, project_backward, MlpGrads, ProjectionHead};
use crate::error::{Error, Result};
use crate::numerics::{dot, EmbeddingBatch, Matrix};

/// Configuration of the view-consistency loss. The target branch is always
/// detached.
#[derive(Debug, Clone, Copy)]
pub struct NcsSpec<'a> {
    head: &'a ProjectionHead,
}

impl<'a> NcsSpec<'a> {
    pub fn new(head: &'a ProjectionHead) -> Self {
        Self { head }
    }

    pub fn head(&self) -> &'a ProjectionHead {
        self.head
    }

    pub fn stop_grad_target(&self) -> bool {
        true
    }
}

pub(crate) struct NcsTerm {
    pub value: f64,
    pub grad_online: Matrix,
    pub grad_target: Matrix,
    pub head_grads: MlpGrads,
}

/// `-(1/B) Σ_i weight · p(online_i) · sg(target_i)`. The target receives no
/// gradient.
pub(crate) fn ncs_term(
    online: &EmbeddingBatch,
    target: &EmbeddingBatch,
    head: &ProjectionHead,
    weight: f64,
) -> Result<NcsTerm> {
    let n = online.batch_size();
    let (q, cache) = project(head, online)?;
    let coef = -weight / n as f64;
    let value = coef * (0..n).map(|i| dot(q.row(i), target.row(i))).sum::<f64>();
    let mut grad_q = target.matrix().clone();
    grad_q.scale(coef);
    let (head_grads, grad_online) = project_backward(head, &cache, &grad_q)?;
    Ok(NcsTerm {
        value,
        grad_online,
        grad_target: Matrix::zeros(n, target.dim()),
        head_grads,
    })
}

fn add_grads(a: &mut MlpGrads, b: &MlpGrads) {
    for (la, lb) in a.layers_mut().iter_mut().zip(b.layers()) {
        la.weight.add_assign(&lb.weight).expect("same head layout");
        for (x, y) in la.bias.iter_mut().zip(&lb.bias) {
            *x += y;
        }
    }
}

/// Gradients are returned for `[z_i1, z_i2]` plus the head.
pub fn ncs_loss(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    spec: &NcsSpec<'_>,
) -> Result<LossOutput> {
    check_pair(z_i1, z_i2, "ncs")?;
    if spec.head.dim() != z_i1.dim() || spec.head.mlp().input_dim() != z_i1.dim() {
        return Err(Error::ShapeMismatch(format!(
            "projection head is {}-dimensional, embeddings are {}",
            spec.head.dim(),
            z_i1.dim()
        )));
    }
    let first = ncs_term(z_i1, z_i2, spec.head, 0.5)?;
    let second = ncs_term(z_i2, z_i1, spec.head, 0.5)?;

    let mut g1 = first.grad_online;
    g1.add_assign(&second.grad_target)?;
    let mut g2 = second.grad_online;
    g2.add_assign(&first.grad_target)?;
    let mut head_grads = first.head_grads;
    add_grads(&mut head_grads, &second.head_grads);

    let value = first.value + second.value;
    Ok(LossOutput {
        value,
        grads: vec![g1, g2],
        grad_tau: 0.0,
        head_grads: Some(head_grads),
        diagnostics: Diagnostics {
            terms: vec![("ncs", value)],
            ..Diagnostics::default()
        },
    })
}

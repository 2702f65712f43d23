use super::{
    mv_simcon_masks, mv_simcon_with_masks, ncs_loss, LossOutput, MvMasks, NcsSpec, Temperature,
};
use crate::error::Result;
use crate::numerics::EmbeddingBatch;

/// Two-view loss over given masks, optionally plus the view-consistency term,
/// with unit weights. Gradients are returned for `[z_i1, z_i2, z_t]`.
pub fn composite_loss(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    masks: &MvMasks,
    temp: &Temperature,
    ncs: Option<&NcsSpec<'_>>,
) -> Result<LossOutput> {
    let mut out = mv_simcon_with_masks(z_i1, z_i2, z_t, masks, temp)?;
    let mv_value = out.value;
    out.diagnostics.terms.push(("mv_simcon", mv_value));
    if let Some(spec) = ncs {
        let c = ncs_loss(z_i1, z_i2, spec)?;
        out.value += c.value;
        out.grads[0].add_assign(&c.grads[0])?;
        out.grads[1].add_assign(&c.grads[1])?;
        out.head_grads = c.head_grads;
        out.diagnostics.terms.push(("ncs", c.value));
    }
    Ok(out)
}

/// Full objective: two-view loss with joint image positives plus the
/// view-consistency term.
pub fn total_loss(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    temp: &Temperature,
    lambda: f64,
    spec: &NcsSpec<'_>,
) -> Result<LossOutput> {
    let masks = mv_simcon_masks(z_i1, z_i2, z_t, lambda, true)?;
    composite_loss(z_i1, z_i2, z_t, &masks, temp, Some(spec))
}

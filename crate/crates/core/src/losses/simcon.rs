//! Similarity-aware contrastive loss, single- and two-view.

use super::{
    backprop_cross, backprop_gram, check_mask, check_pair, contrastive_direction,
    joint_positive_mask, positive_mask, tau_gradient, Diagnostics, LossOutput, PositiveMask,
    Temperature,
};
use crate::error::Result;
use crate::numerics::{cosine_similarity_matrix, EmbeddingBatch, Matrix};

/// Whether the intra-modal exponents take part in numerators and
/// denominators. `Masked` drops them, which with identity positive masks
/// reduces the loss to InfoNCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntraModal {
    #[default]
    Include,
    Masked,
}

struct PairTerms {
    img_to_txt: f64,
    txt_to_img: f64,
    grad_tau: f64,
    img_positives: f64,
    txt_positives: f64,
    diagonal_share: Option<f64>,
}

/// Image-to-text plus text-to-image terms for one image view, accumulating
/// embedding gradients in place.
fn simcon_pair(
    z_img: &EmbeddingBatch,
    z_txt: &EmbeddingBatch,
    p_img: &PositiveMask,
    p_txt: &PositiveMask,
    tau: f64,
    intra: IntraModal,
    grad_img: &mut Matrix,
    grad_txt: &mut Matrix,
) -> Result<PairTerms> {
    let s_it = z_img.matmul_t(z_txt)?;
    let s_ti = s_it.transpose();
    let (s_ii, s_tt) = match intra {
        IntraModal::Include => (Some(z_img.matmul_t(z_img)?), Some(z_txt.matmul_t(z_txt)?)),
        IntraModal::Masked => (None, None),
    };

    let img = contrastive_direction(&s_it, s_ii.as_ref(), p_img, tau);
    let txt = contrastive_direction(&s_ti, s_tt.as_ref(), p_txt, tau);

    let mut g_it = img.grad_cross;
    g_it.add_assign(&txt.grad_cross.transpose())?;
    backprop_cross(&g_it, z_img, z_txt, grad_img, grad_txt);
    let mut grad_tau = tau_gradient(&g_it, &s_it, tau);

    if let (Some(s_ii), Some(h_ii)) = (&s_ii, &img.grad_intra) {
        backprop_gram(h_ii, z_img, grad_img);
        grad_tau += tau_gradient(h_ii, s_ii, tau);
    }
    if let (Some(s_tt), Some(h_tt)) = (&s_tt, &txt.grad_intra) {
        backprop_gram(h_tt, z_txt, grad_txt);
        grad_tau += tau_gradient(h_tt, s_tt, tau);
    }

    Ok(PairTerms {
        img_to_txt: img.value,
        txt_to_img: txt.value,
        grad_tau,
        img_positives: img.mean_positives,
        txt_positives: txt.mean_positives,
        diagonal_share: img.diagonal_share,
    })
}

/// Single-view loss with externally supplied positive masks. Gradients are
/// returned for `[z_i, z_t]`; the masks are constants.
pub fn simcon(
    z_i: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    p_i: &PositiveMask,
    p_t: &PositiveMask,
    temp: &Temperature,
    intra: IntraModal,
) -> Result<LossOutput> {
    check_pair(z_i, z_t, "simcon")?;
    let n = z_i.batch_size();
    check_mask(p_i, n, "image")?;
    check_mask(p_t, n, "text")?;

    let mut grad_i = Matrix::zeros(n, z_i.dim());
    let mut grad_t = Matrix::zeros(n, z_t.dim());
    let terms = simcon_pair(
        z_i,
        z_t,
        p_i,
        p_t,
        temp.tau(),
        intra,
        &mut grad_i,
        &mut grad_t,
    )?;

    Ok(LossOutput {
        value: terms.img_to_txt + terms.txt_to_img,
        grads: vec![grad_i, grad_t],
        grad_tau: terms.grad_tau,
        head_grads: None,
        diagnostics: Diagnostics {
            terms: vec![("i2t", terms.img_to_txt), ("t2i", terms.txt_to_img)],
            mean_positives_image: Some(terms.img_positives),
            mean_positives_text: Some(terms.txt_positives),
            diagonal_numerator_share: terms.diagonal_share,
        },
    })
}

/// Positive masks for the two-view loss: one image mask per view and the text
/// mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MvMasks {
    pub view1: PositiveMask,
    pub view2: PositiveMask,
    pub text: PositiveMask,
}

/// Builds two-view masks from detached similarities. With `joint` set both
/// views share `H(max(S11, S22) - λ)`; otherwise each view is thresholded on
/// its own.
pub fn mv_simcon_masks(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    lambda: f64,
    joint: bool,
) -> Result<MvMasks> {
    check_pair(z_i1, z_i2, "mv_simcon views")?;
    check_pair(z_i1, z_t, "mv_simcon image/text")?;
    let s11 = cosine_similarity_matrix(z_i1, z_i1)?;
    let s22 = cosine_similarity_matrix(z_i2, z_i2)?;
    let stt = cosine_similarity_matrix(z_t, z_t)?;
    let text = positive_mask(&stt, lambda)?;
    let (view1, view2) = if joint {
        let j = joint_positive_mask(&s11, &s22, lambda)?;
        (j.clone(), j)
    } else {
        (positive_mask(&s11, lambda)?, positive_mask(&s22, lambda)?)
    };
    Ok(MvMasks { view1, view2, text })
}

/// Two-view loss with given masks: both views are aligned to the text in
/// both directions. Gradients are returned for `[z_i1, z_i2, z_t]`.
pub fn mv_simcon_with_masks(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    masks: &MvMasks,
    temp: &Temperature,
) -> Result<LossOutput> {
    check_pair(z_i1, z_i2, "mv_simcon views")?;
    check_pair(z_i1, z_t, "mv_simcon image/text")?;
    let n = z_i1.batch_size();
    check_mask(&masks.view1, n, "view-1 image")?;
    check_mask(&masks.view2, n, "view-2 image")?;
    check_mask(&masks.text, n, "text")?;

    let tau = temp.tau();
    let d = z_i1.dim();
    let mut g1 = Matrix::zeros(n, d);
    let mut g2 = Matrix::zeros(n, d);
    let mut gt = Matrix::zeros(n, d);
    let v1 = simcon_pair(
        z_i1,
        z_t,
        &masks.view1,
        &masks.text,
        tau,
        IntraModal::Include,
        &mut g1,
        &mut gt,
    )?;
    let v2 = simcon_pair(
        z_i2,
        z_t,
        &masks.view2,
        &masks.text,
        tau,
        IntraModal::Include,
        &mut g2,
        &mut gt,
    )?;

    let value = v1.img_to_txt + v2.img_to_txt + v1.txt_to_img + v2.txt_to_img;
    let share = match (v1.diagonal_share, v2.diagonal_share) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    Ok(LossOutput {
        value,
        grads: vec![g1, g2, gt],
        grad_tau: v1.grad_tau + v2.grad_tau,
        head_grads: None,
        diagnostics: Diagnostics {
            terms: vec![
                ("i1_t", v1.img_to_txt),
                ("i2_t", v2.img_to_txt),
                ("t_i1", v1.txt_to_img),
                ("t_i2", v2.txt_to_img),
            ],
            mean_positives_image: Some(0.5 * (v1.img_positives + v2.img_positives)),
            mean_positives_text: Some(v1.txt_positives),
            diagonal_numerator_share: share,
        },
    })
}

/// Two-view loss with joint image positives built at threshold `lambda`.
pub fn mv_simcon(
    z_i1: &EmbeddingBatch,
    z_i2: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    temp: &Temperature,
    lambda: f64,
) -> Result<LossOutput> {
    let masks = mv_simcon_masks(z_i1, z_i2, z_t, lambda, true)?;
    mv_simcon_with_masks(z_i1, z_i2, z_t, &masks, temp)
}

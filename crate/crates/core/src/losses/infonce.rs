use super::{
    backprop_cross, check_pair, contrastive_direction, tau_gradient, Diagnostics, LossOutput,
    PositiveMask, Temperature,
};
use crate::error::Result;
use crate::numerics::{EmbeddingBatch, Matrix};

/// Symmetric InfoNCE: image-to-text plus text-to-image, unit weights.
///
/// Gradients are returned for `[z_i, z_t]`.
pub fn info_nce(
    z_i: &EmbeddingBatch,
    z_t: &EmbeddingBatch,
    temp: &Temperature,
) -> Result<LossOutput> {
    check_pair(z_i, z_t, "info_nce")?;
    let tau = temp.tau();
    let n = z_i.batch_size();
    let s_it = z_i.matmul_t(z_t)?;
    let s_ti = s_it.transpose();
    let identity = PositiveMask::identity(n);

    let i2t = contrastive_direction(&s_it, None, &identity, tau);
    let t2i = contrastive_direction(&s_ti, None, &identity, tau);

    let mut g = i2t.grad_cross;
    g.add_assign(&t2i.grad_cross.transpose())?;

    let mut grad_i = Matrix::zeros(n, z_i.dim());
    let mut grad_t = Matrix::zeros(n, z_t.dim());
    backprop_cross(&g, z_i, z_t, &mut grad_i, &mut grad_t);

    Ok(LossOutput {
        value: i2t.value + t2i.value,
        grads: vec![grad_i, grad_t],
        grad_tau: tau_gradient(&g, &s_it, tau),
        head_grads: None,
        diagnostics: Diagnostics {
            terms: vec![("i2t", i2t.value), ("t2i", t2i.value)],
            mean_positives_image: Some(1.0),
            mean_positives_text: Some(1.0),
            diagonal_numerator_share: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::numerics::l2_normalize_rows;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        l2_normalize_rows(&Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let z = batch(&[&[0.3, 0.4]]);
        let t = batch(&[&[-1.0, 0.2]]);
        let out = info_nce(&z, &t, &Temperature::new(0.07).unwrap()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(out.grad_tau, 0.0);
    }

    #[test]
    fn identical_rows_give_two_log_b() {
        let row: &[f64] = &[0.2, -0.5, 0.1];
        let z = batch(&[row, row, row, row]);
        let out = info_nce(&z, &z, &Temperature::new(0.07).unwrap()).unwrap();
        assert!((out.value - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_two_by_two() {
        // -log(e^{1/τ} / (e^{1/τ} + 1)) per anchor, both directions.
        let z = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let tau = 0.07;
        let out = info_nce(&z, &z, &Temperature::new(tau).unwrap()).unwrap();
        let e = (1.0f64 / tau).exp();
        let expect = -2.0 * (e / (e + 1.0)).ln();
        assert!((out.value - expect).abs() < 1e-10);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let a = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = batch(&[&[1.0, 0.0]]);
        assert!(matches!(
            info_nce(&a, &b, &Temperature::new(0.1).unwrap()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let a = batch(&[&[1.0, 0.0]]);
        let mut m = a.matrix().clone();
        m.data_mut()[0] = f64::NAN;
        let bad = EmbeddingBatch::from_raw(m);
        assert!(matches!(
            info_nce(&bad, &a, &Temperature::new(0.1).unwrap()),
            Err(Error::NonFinite(_))
        ));
    }
}

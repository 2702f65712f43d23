use crate::error::{Error, Result};
use crate::numerics::{dot, EmbeddingBatch};

/// Index of the largest score; ties go to the lowest index.
fn argmax(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Cross-modal recall@1 in both directions: `(image→text, text→image)`.
pub fn eval_retrieval(z_images: &EmbeddingBatch, z_texts: &EmbeddingBatch) -> Result<(f64, f64)> {
    if z_images.shape() != z_texts.shape() {
        return Err(Error::ShapeMismatch(format!(
            "retrieval over {:?} images and {:?} texts",
            z_images.shape(),
            z_texts.shape()
        )));
    }
    let n = z_images.rows();
    let sims = z_images.matmul_t(z_texts)?;
    let i2t = (0..n)
        .filter(|&i| argmax(sims.row(i).iter().copied()) == i)
        .count();
    let t2i = (0..n)
        .filter(|&j| argmax((0..n).map(|i| sims.get(i, j))) == j)
        .count();
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}

/// Fraction of images whose most similar class prototype is their own class.
pub fn eval_alignment(
    z_images: &EmbeddingBatch,
    class_ids: &[usize],
    prototypes: &EmbeddingBatch,
) -> Result<f64> {
    if class_ids.len() != z_images.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} class ids for {} images",
            class_ids.len(),
            z_images.rows()
        )));
    }
    if prototypes.dim() != z_images.dim() {
        return Err(Error::DimMismatch(format!(
            "prototype dim {} vs embedding dim {}",
            prototypes.dim(),
            z_images.dim()
        )));
    }
    let hits = (0..z_images.rows())
        .filter(|&i| {
            let z = z_images.row(i);
            argmax((0..prototypes.rows()).map(|c| dot(z, prototypes.row(c)))) == class_ids[i]
        })
        .count();
    Ok(hits as f64 / z_images.rows() as f64)
}

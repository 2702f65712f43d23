//! Randomized agreement between the vectorized losses and the brute-force
//! oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoders::ProjectionHead;
use crate::error::Result;
use crate::losses::{
    info_nce, mv_simcon, mv_simcon_masks, mv_simcon_with_masks, ncs_loss, positive_masks, simcon,
    total_loss, IntraModal, NcsSpec, Temperature,
};
use crate::numerics::{cosine_similarity_matrix, l2_normalize_rows, EmbeddingBatch, Matrix};
use crate::oracle::{
    oracle_info_nce, oracle_mv_simcon, oracle_mv_simcon_views, oracle_ncs, oracle_positive_mask,
    oracle_simcon, oracle_total,
};

pub const COMPARED: [&str; 6] = [
    "info_nce",
    "simcon",
    "mv_simcon",
    "mv_simcon_per_view",
    "ncs_loss",
    "total_loss",
];
pub const TAUS: [f64; 2] = [0.07, 0.5];
pub const LAMBDAS: [f64; 3] = [-1.0, 0.5, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleDiff {
    pub name: &'static str,
    pub trials: usize,
    pub max_abs_diff: f64,
}

/// Instance `t` uses `TAUS[t % 2]` and `LAMBDAS[t % 3]`, so every pairing
/// occurs within six trials.
#[derive(Debug, Clone)]
pub struct Trial {
    pub z_i1: EmbeddingBatch,
    pub z_i2: EmbeddingBatch,
    pub z_t: EmbeddingBatch,
    pub tau: f64,
    pub lambda: f64,
    pub head: ProjectionHead,
}

fn noisy_copy(rng: &mut ChaCha8Rng, base: &Matrix, spread: f64) -> Result<EmbeddingBatch> {
    let mut m = base.clone();
    for v in m.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += spread * g;
    }
    l2_normalize_rows(&m)
}

pub fn random_trial(
    rng: &mut ChaCha8Rng,
    t: usize,
    max_batch: usize,
    max_dim: usize,
) -> Result<Trial> {
    let b = rng.random_range(1..=max_batch);
    let d = rng.random_range(2..=max_dim);
    let base = Matrix::new(
        b,
        d,
        (0..b * d)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect(),
    )?;
    // spread controls how many pairs clear the thresholds
    let spread = rng.random_range(0.05..1.0);
    Ok(Trial {
        z_i1: noisy_copy(rng, &base, spread * 0.5)?,
        z_i2: noisy_copy(rng, &base, spread * 0.5)?,
        z_t: noisy_copy(rng, &base, spread)?,
        tau: TAUS[t % TAUS.len()],
        lambda: LAMBDAS[t % LAMBDAS.len()],
        head: ProjectionHead::new(rng.random(), d, 2 * d)?,
    })
}

/// `|vectorized - oracle|` for each compared loss on one trial.
pub fn trial_diffs(tr: &Trial) -> Result<[f64; 6]> {
    let temp = Temperature::new(tr.tau)?;
    let (z1, z2, zt) = (&tr.z_i1, &tr.z_i2, &tr.z_t);

    let nce = info_nce(z1, zt, &temp)?.value - oracle_info_nce(z1, zt, tr.tau);

    let (p_i, p_t) = positive_masks(
        &cosine_similarity_matrix(z1, z1)?,
        &cosine_similarity_matrix(zt, zt)?,
        tr.lambda,
    )?;
    let sc = simcon(z1, zt, &p_i, &p_t, &temp, IntraModal::Include)?.value
        - oracle_simcon(
            z1,
            zt,
            &oracle_positive_mask(z1, tr.lambda),
            &oracle_positive_mask(zt, tr.lambda),
            tr.tau,
        )?;

    let mv = mv_simcon(z1, z2, zt, &temp, tr.lambda)?.value
        - oracle_mv_simcon(z1, z2, zt, tr.tau, tr.lambda)?;

    let per_view = mv_simcon_masks(z1, z2, zt, tr.lambda, false)?;
    let mv_pv = mv_simcon_with_masks(z1, z2, zt, &per_view, &temp)?.value
        - oracle_mv_simcon_views(z1, z2, zt, tr.tau, tr.lambda, false)?;

    let spec = NcsSpec::new(&tr.head);
    let ncs = ncs_loss(z1, z2, &spec)?.value - oracle_ncs(z1, z2, &tr.head);

    let total = total_loss(z1, z2, zt, &temp, tr.lambda, &spec)?.value
        - oracle_total(z1, z2, zt, tr.tau, tr.lambda, &tr.head)?;

    Ok([nce, sc, mv, mv_pv, ncs, total].map(f64::abs))
}

/// Runs `trials` random instances with `|B| <= 16` and `d <= 32`.
pub fn oracle_diff(trials: usize, seed: u64) -> Result<Vec<OracleDiff>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    for t in 0..trials {
        let tr = random_trial(&mut rng, t, 16, 32)?;
        for (w, d) in worst.iter_mut().zip(trial_diffs(&tr)?) {
            // NaN must not hide behind max()
            *w = if d.is_nan() { f64::NAN } else { w.max(d) };
        }
    }
    Ok(COMPARED
        .iter()
        .zip(worst)
        .map(|(&name, max_abs_diff)| OracleDiff {
            name,
            trials,
            max_abs_diff,
        })
        .collect())
}

/// True when every loss stayed strictly below `tol`.
pub fn all_within(report: &[OracleDiff], tol: f64) -> bool {
    report.iter().all(|r| r.max_abs_diff < tol)
}

//! Finite-difference verification of every analytic gradient.
//!
//! Masks are computed once per instance and then frozen, and the
//! view-consistency targets are frozen copies of the unperturbed embeddings,
//! so the numeric derivative sees exactly the function the analytic one
//! differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::encoders::{encode, encoder_backward, init_encoder, Mlp, ProjectionHead};
use crate::error::Result;
use crate::losses::{
    info_nce, mv_simcon_masks, mv_simcon_with_masks, ncs_loss, ncs_term, positive_masks, simcon,
    total_loss, IntraModal, MvMasks, NcsSpec, PositiveMask, Temperature,
};
use crate::numerics::{
    compare_gradients, cosine_similarity_matrix, finite_difference_gradient, l2_normalize_rows,
    EmbeddingBatch, Matrix,
};

/// Names of the checked computations, in report order.
pub const CHECKED: [&str; 6] = [
    "info_nce",
    "simcon",
    "mv_simcon",
    "ncs_loss",
    "total_loss",
    "end_to_end",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Random instances per loss; the first one always has a single row.
    pub instances: usize,
    pub max_batch: usize,
    pub max_dim: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Below this gradient magnitude the absolute tolerance applies.
    pub small: f64,
    pub seed: u64,
    /// Name of a loss whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            max_batch: 8,
            max_dim: 16,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            small: 1e-3,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
    /// First failing instance and coordinate, if any.
    pub failure: Option<String>,
}

/// Runs the whole suite. Errors only on evaluation failures; tolerance
/// violations are reported through [`LossCheck::passed`].
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<LossCheck>> {
    CHECKED
        .iter()
        .enumerate()
        .map(|(k, &name)| check_loss(name, opts, opts.seed.wrapping_add(k as u64 * 7919)))
        .collect()
}

pub fn all_passed(report: &[LossCheck]) -> bool {
    report.iter().all(|c| c.passed)
}

fn check_loss(name: &'static str, opts: &GradcheckOptions, seed: u64) -> Result<LossCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LossCheck {
        name,
        instances: opts.instances,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        passed: true,
        failure: None,
    };
    for k in 0..opts.instances {
        let b = if k == 0 {
            1
        } else {
            rng.random_range(1..=opts.max_batch.max(1))
        };
        let d = rng.random_range(2..=opts.max_dim.max(2));
        let inst = Instance::random(&mut rng, b, d, k)?;
        let (mut analytic, numeric) = match name {
            "info_nce" => inst.info_nce(opts.step)?,
            "simcon" => inst.simcon(opts.step)?,
            "mv_simcon" => inst.mv_simcon(opts.step)?,
            "ncs_loss" => inst.ncs(opts.step)?,
            "total_loss" => inst.total(opts.step)?,
            _ => end_to_end(&mut rng, b, opts.step)?,
        };
        if opts.corrupt.as_deref() == Some(name) {
            analytic[0] = analytic[0] * 1.5 + 1e-3;
        }
        let cmp = compare_gradients(&analytic, &numeric, opts.rel_tol, opts.abs_tol, opts.small);
        out.max_rel_err = out.max_rel_err.max(cmp.max_rel_err);
        out.max_abs_err = out.max_abs_err.max(cmp.max_abs_err);
        if !cmp.passed && out.passed {
            out.passed = false;
            out.failure = Some(format!(
                "instance {k} (|B|={b}, d={d}), coordinate {}",
                cmp.worst_index.unwrap_or(0)
            ));
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let data = (0..rows * cols).map(|_| gaussian(rng)).collect();
    Ok(l2_normalize_rows(&Matrix::new(rows, cols, data)?)?.into_matrix())
}

/// Unit rows near `base`, so positive sets are not all trivial.
fn near(rng: &mut ChaCha8Rng, base: &Matrix, spread: f64) -> Result<Matrix> {
    let mut noisy = base.clone();
    for v in noisy.data_mut() {
        *v += spread * gaussian(rng);
    }
    Ok(l2_normalize_rows(&noisy)?.into_matrix())
}

/// Packs matrices and trailing scalars into one vector.
fn pack(mats: &[&Matrix], tail: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
    v.extend_from_slice(tail);
    v
}

/// Splits `x` back into matrices shaped like `shapes`; returns the rest.
fn unpack<'a>(x: &'a [f64], shapes: &[(usize, usize)]) -> (Vec<EmbeddingBatch>, &'a [f64]) {
    let mut at = 0;
    let mats = shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::new(r, c, x[at..at + r * c].to_vec()).expect("finite probe");
            at += r * c;
            EmbeddingBatch::from_raw(m)
        })
        .collect();
    (mats, &x[at..])
}

fn temp(tau: f64) -> Temperature {
    Temperature::new(tau).expect("positive probe temperature")
}

fn with_head(head: &ProjectionHead, flat: &[f64]) -> ProjectionHead {
    let mut h = head.clone();
    h.mlp_mut().load_flat(flat);
    h
}

/// View-consistency value with frozen targets.
fn frozen_ncs(
    z1: &EmbeddingBatch,
    z2: &EmbeddingBatch,
    t1: &EmbeddingBatch,
    t2: &EmbeddingBatch,
    head: &ProjectionHead,
) -> Result<f64> {
    Ok(ncs_term(z1, t2, head, 0.5)?.value + ncs_term(z2, t1, head, 0.5)?.value)
}

struct Instance {
    z1: EmbeddingBatch,
    z2: EmbeddingBatch,
    zt: EmbeddingBatch,
    tau: f64,
    lambda: f64,
    head: ProjectionHead,
    variant: usize,
}

type GradPair = (Vec<f64>, Vec<f64>);

impl Instance {
    fn random(rng: &mut ChaCha8Rng, b: usize, d: usize, variant: usize) -> Result<Self> {
        let z1 = unit_rows(rng, b, d)?;
        let z2 = near(rng, &z1, 0.3)?;
        let zt = near(rng, &z1, 0.6)?;
        let tau = [0.07, 0.5, rng.random_range(0.05..1.0)][variant % 3];
        let lambda = [-1.0, 0.5, 0.95, rng.random_range(-0.5..0.99)][variant % 4];
        let head = ProjectionHead::new(rng.random(), d, 2 * d)?;
        Ok(Self {
            z1: EmbeddingBatch::from_unit_rows(z1)?,
            z2: EmbeddingBatch::from_unit_rows(z2)?,
            zt: EmbeddingBatch::from_unit_rows(zt)?,
            tau,
            lambda,
            head,
            variant,
        })
    }

    fn shape(&self) -> (usize, usize) {
        self.z1.shape()
    }

    fn info_nce(&self, h: f64) -> Result<GradPair> {
        let out = info_nce(&self.z1, &self.zt, &temp(self.tau))?;
        let analytic = pack(&[&out.grads[0], &out.grads[1]], &[out.grad_tau]);
        let x = pack(&[&self.z1, &self.zt], &[self.tau]);
        let s = self.shape();
        let numeric = finite_difference_gradient(
            |x| {
                let (z, rest) = unpack(x, &[s, s]);
                info_nce(&z[0], &z[1], &temp(rest[0])).map_or(f64::NAN, |o| o.value)
            },
            &x,
            h,
        )?;
        Ok((analytic, numeric))
    }

    fn simcon(&self, h: f64) -> Result<GradPair> {
        let s_ii = cosine_similarity_matrix(&self.z1, &self.z1)?;
        let s_tt = cosine_similarity_matrix(&self.zt, &self.zt)?;
        let (p_i, p_t): (PositiveMask, PositiveMask) = positive_masks(&s_ii, &s_tt, self.lambda)?;
        let intra = if self.variant % 5 == 4 {
            IntraModal::Masked
        } else {
            IntraModal::Include
        };
        let out = simcon(&self.z1, &self.zt, &p_i, &p_t, &temp(self.tau), intra)?;
        let analytic = pack(&[&out.grads[0], &out.grads[1]], &[out.grad_tau]);
        let x = pack(&[&self.z1, &self.zt], &[self.tau]);
        let s = self.shape();
        let numeric = finite_difference_gradient(
            |x| {
                let (z, rest) = unpack(x, &[s, s]);
                simcon(&z[0], &z[1], &p_i, &p_t, &temp(rest[0]), intra)
                    .map_or(f64::NAN, |o| o.value)
            },
            &x,
            h,
        )?;
        Ok((analytic, numeric))
    }

    fn masks(&self) -> Result<MvMasks> {
        mv_simcon_masks(
            &self.z1,
            &self.z2,
            &self.zt,
            self.lambda,
            self.variant.is_multiple_of(2),
        )
    }

    fn mv_simcon(&self, h: f64) -> Result<GradPair> {
        let masks = self.masks()?;
        let out = mv_simcon_with_masks(&self.z1, &self.z2, &self.zt, &masks, &temp(self.tau))?;
        let analytic = pack(
            &[&out.grads[0], &out.grads[1], &out.grads[2]],
            &[out.grad_tau],
        );
        let x = pack(&[&self.z1, &self.z2, &self.zt], &[self.tau]);
        let s = self.shape();
        let numeric = finite_difference_gradient(
            |x| {
                let (z, rest) = unpack(x, &[s, s, s]);
                mv_simcon_with_masks(&z[0], &z[1], &z[2], &masks, &temp(rest[0]))
                    .map_or(f64::NAN, |o| o.value)
            },
            &x,
            h,
        )?;
        Ok((analytic, numeric))
    }

    fn ncs(&self, h: f64) -> Result<GradPair> {
        let out = ncs_loss(&self.z1, &self.z2, &NcsSpec::new(&self.head))?;
        let head_grads = out
            .head_grads
            .as_ref()
            .expect("ncs returns head gradients")
            .flatten();
        let analytic = pack(&[&out.grads[0], &out.grads[1]], &head_grads);
        let x = pack(&[&self.z1, &self.z2], &self.head.mlp().flatten());
        let s = self.shape();
        let numeric = finite_difference_gradient(
            |x| {
                let (z, rest) = unpack(x, &[s, s]);
                frozen_ncs(
                    &z[0],
                    &z[1],
                    &self.z1,
                    &self.z2,
                    &with_head(&self.head, rest),
                )
                .unwrap_or(f64::NAN)
            },
            &x,
            h,
        )?;
        Ok((analytic, numeric))
    }

    fn total(&self, h: f64) -> Result<GradPair> {
        let masks = mv_simcon_masks(&self.z1, &self.z2, &self.zt, self.lambda, true)?;
        let out = total_loss(
            &self.z1,
            &self.z2,
            &self.zt,
            &temp(self.tau),
            self.lambda,
            &NcsSpec::new(&self.head),
        )?;
        let mut tail = vec![out.grad_tau];
        tail.extend(
            out.head_grads
                .as_ref()
                .expect("total returns head gradients")
                .flatten(),
        );
        let analytic = pack(&[&out.grads[0], &out.grads[1], &out.grads[2]], &tail);
        let mut tail = vec![self.tau];
        tail.extend(self.head.mlp().flatten());
        let x = pack(&[&self.z1, &self.z2, &self.zt], &tail);
        let s = self.shape();
        let numeric = finite_difference_gradient(
            |x| {
                let (z, rest) = unpack(x, &[s, s, s]);
                let head = with_head(&self.head, &rest[1..]);
                let mv = mv_simcon_with_masks(&z[0], &z[1], &z[2], &masks, &temp(rest[0]))
                    .map(|o| o.value);
                let ncs = frozen_ncs(&z[0], &z[1], &self.z1, &self.z2, &head);
                mv.and_then(|a| ncs.map(|b| a + b)).unwrap_or(f64::NAN)
            },
            &x,
            h,
        )?;
        Ok((analytic, numeric))
    }
}

fn mlps_flat(mlps: &[&Mlp]) -> Vec<f64> {
    mlps.iter().flat_map(|m| m.flatten()).collect()
}

fn load_mlps(base: &[&Mlp], x: &[f64]) -> (Vec<Mlp>, usize) {
    let mut at = 0;
    let out = base
        .iter()
        .map(|m| {
            let mut c = (*m).clone();
            let n = c.param_count();
            c.load_flat(&x[at..at + n]);
            at += n;
            c
        })
        .collect();
    (out, at)
}

/// Raw inputs -> encoders -> full objective, differentiated with respect to
/// every parameter of both towers, the head and the temperature.
fn end_to_end(rng: &mut ChaCha8Rng, b: usize, h: f64) -> Result<GradPair> {
    let (in_img, in_txt, d) = (6, 5, 8);
    let mut raw = |cols| -> Result<Matrix> {
        Matrix::new(b, cols, (0..b * cols).map(|_| gaussian(rng)).collect())
    };
    let (x1, x2, xt) = (raw(in_img)?, raw(in_img)?, raw(in_txt)?);
    let image = init_encoder(rng.random(), in_img, &[7], d)?;
    let text = init_encoder(rng.random(), in_txt, &[7], d)?;
    let head = ProjectionHead::new(rng.random(), d, 2 * d)?;
    let tau = rng.random_range(0.05..0.5);
    let lambda = [-1.0, 0.3, 0.9][rng.random_range(0..3)];

    let (z1, c1) = encode(&image, &x1)?;
    let (z2, c2) = encode(&image, &x2)?;
    let (zt, ct) = encode(&text, &xt)?;
    let masks = mv_simcon_masks(&z1, &z2, &zt, lambda, true)?;
    let out = total_loss(&z1, &z2, &zt, &temp(tau), lambda, &NcsSpec::new(&head))?;
    let mut g_img = encoder_backward(&image, &c1, &out.grads[0])?;
    let g_img2 = encoder_backward(&image, &c2, &out.grads[1])?;
    for (a, b) in g_img.layers_mut().iter_mut().zip(g_img2.layers()) {
        a.weight.add_assign(&b.weight)?;
        a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
    }
    let g_txt = encoder_backward(&text, &ct, &out.grads[2])?;
    let g_head = out
        .head_grads
        .as_ref()
        .expect("total returns head gradients");
    let mut analytic = mlps_flat(&[&g_img, &g_txt, g_head]);
    analytic.push(out.grad_tau);

    let base = [&image, &text, head.mlp()];
    let mut x = mlps_flat(&base);
    x.push(tau);
    let numeric = finite_difference_gradient(
        |x| {
            let (m, at) = load_mlps(&base, x);
            let eval = || -> Result<f64> {
                let head = ProjectionHead::from_mlp(m[2].clone())?;
                let (p1, _) = encode(&m[0], &x1)?;
                let (p2, _) = encode(&m[0], &x2)?;
                let (pt, _) = encode(&m[1], &xt)?;
                let mv = mv_simcon_with_masks(&p1, &p2, &pt, &masks, &temp(x[at]))?.value;
                Ok(mv + frozen_ncs(&p1, &p2, &z1, &z2, &head)?)
            };
            eval().unwrap_or(f64::NAN)
        },
        &x,
        h,
    )?;
    Ok((analytic, numeric))
}

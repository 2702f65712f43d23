use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use simcon::encoders::ProjectionHead;
use simcon::losses::{
    info_nce, joint_positive_mask, mv_simcon, mv_simcon_masks, mv_simcon_with_masks, ncs_loss,
    positive_masks, simcon, total_loss, IntraModal, NcsSpec, PositiveMask, Temperature,
};
use simcon::numerics::{
    cosine_similarity_matrix, l2_normalize_rows, logsumexp, EmbeddingBatch, Matrix,
};
use simcon::schedules::{lambda_at_epoch, lr_at_step, LambdaSchedule, LrSchedule};
use simcon::trainer::{eval_alignment, eval_retrieval};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingBatch {
    l2_normalize_rows(&gaussian(rng, rows, cols)).unwrap()
}

/// Rows near a shared base so thresholds between -1 and 1 give mixed masks.
fn correlated(rng: &mut ChaCha8Rng, base: &Matrix, spread: f64) -> EmbeddingBatch {
    let mut m = base.clone();
    for v in m.data_mut() {
        let g: f64 = StandardNormal.sample(&mut *rng);
        *v += spread * g;
    }
    l2_normalize_rows(&m).unwrap()
}

struct Instance {
    z1: EmbeddingBatch,
    z2: EmbeddingBatch,
    zt: EmbeddingBatch,
    head: ProjectionHead,
}

fn instance(seed: u64, b: usize, d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = gaussian(&mut rng, b, d);
    let spread = rng.random_range(0.05..1.5);
    Instance {
        z1: correlated(&mut rng, &base, spread * 0.5),
        z2: correlated(&mut rng, &base, spread * 0.5),
        zt: correlated(&mut rng, &base, spread),
        head: ProjectionHead::new(rng.random(), d, 2 * d).unwrap(),
    }
}

fn permute(z: &EmbeddingBatch, perm: &[usize]) -> EmbeddingBatch {
    z.select_rows(perm)
}

fn shuffled(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    p
}

fn lambda_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(-1.0), Just(0.5), Just(0.95), -1.0f64..=1.0]
}

fn tau_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1e-3), Just(0.07), Just(0.5), Just(1.0), 1e-3f64..=1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_self_similarity(seed in any::<u64>(), b in 1usize..=16, d in 1usize..=32) {
        let z = unit(&mut ChaCha8Rng::seed_from_u64(seed), b, d);
        let s = cosine_similarity_matrix(&z, &z).unwrap();
        for i in 0..b {
            prop_assert!((s.get(i, i) - 1.0).abs() <= 1e-9);
            for j in 0..b {
                prop_assert!((s.get(i, j) - s.get(j, i)).abs() <= 1e-12);
                prop_assert!((-1.0..=1.0).contains(&s.get(i, j)));
            }
        }
    }

    #[test]
    fn logsumexp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let lhs = logsumexp(&shifted).unwrap();
        let rhs = logsumexp(&v).unwrap() + c;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>(), b in 1usize..=16, d in 1usize..=32) {
        let m = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), b, d);
        let once = l2_normalize_rows(&m).unwrap();
        let twice = l2_normalize_rows(once.matrix()).unwrap();
        prop_assert!(once.matrix().max_abs_diff(twice.matrix()).unwrap() <= 1e-12);
        prop_assert!(once.is_normalized());
    }

    #[test]
    fn losses_are_permutation_invariant(
        seed in any::<u64>(),
        b in 1usize..=12,
        d in 2usize..=16,
        tau in tau_strategy(),
        lambda in lambda_strategy(),
    ) {
        let x = instance(seed, b, d);
        let perm = shuffled(seed, b);
        let (p1, p2, pt) = (permute(&x.z1, &perm), permute(&x.z2, &perm), permute(&x.zt, &perm));
        let temp = Temperature::new(tau).unwrap();
        let spec = NcsSpec::new(&x.head);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0);

        prop_assert!(close(
            info_nce(&x.z1, &x.zt, &temp).unwrap().value,
            info_nce(&p1, &pt, &temp).unwrap().value
        ));

        let (mi, mt) = positive_masks(
            &cosine_similarity_matrix(&x.z1, &x.z1).unwrap(),
            &cosine_similarity_matrix(&x.zt, &x.zt).unwrap(),
            lambda,
        ).unwrap();
        let original = simcon(&x.z1, &x.zt, &mi, &mt, &temp, IntraModal::Include).unwrap().value;
        let moved = simcon(&p1, &pt, &mi.permuted(&perm), &mt.permuted(&perm), &temp, IntraModal::Include)
            .unwrap()
            .value;
        prop_assert!(close(original, moved));

        prop_assert!(close(
            mv_simcon(&x.z1, &x.z2, &x.zt, &temp, lambda).unwrap().value,
            mv_simcon(&p1, &p2, &pt, &temp, lambda).unwrap().value
        ));
        prop_assert!(close(
            ncs_loss(&x.z1, &x.z2, &spec).unwrap().value,
            ncs_loss(&p1, &p2, &spec).unwrap().value
        ));
        prop_assert!(close(
            total_loss(&x.z1, &x.z2, &x.zt, &temp, lambda, &spec).unwrap().value,
            total_loss(&p1, &p2, &pt, &temp, lambda, &spec).unwrap().value
        ));
    }

    #[test]
    fn masked_simcon_with_identity_is_info_nce(
        seed in any::<u64>(),
        b in 1usize..=16,
        d in 2usize..=32,
        tau in tau_strategy(),
    ) {
        let x = instance(seed, b, d);
        let temp = Temperature::new(tau).unwrap();
        let id = PositiveMask::identity(b);
        let reduced = simcon(&x.z1, &x.zt, &id, &id, &temp, IntraModal::Masked).unwrap();
        let nce = info_nce(&x.z1, &x.zt, &temp).unwrap();
        prop_assert!((reduced.value - nce.value).abs() <= 1e-12 * nce.value.abs().max(1.0));
        for (a, g) in reduced.grads.iter().zip(&nce.grads) {
            prop_assert!(a.max_abs_diff(g).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn masks_shrink_as_lambda_grows(
        seed in any::<u64>(),
        b in 1usize..=16,
        d in 2usize..=16,
        l1 in -1.0f64..=1.0,
        l2 in -1.0f64..=1.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let x = instance(seed, b, d);
        let s11 = cosine_similarity_matrix(&x.z1, &x.z1).unwrap();
        let s22 = cosine_similarity_matrix(&x.z2, &x.z2).unwrap();
        let (wide, _) = positive_masks(&s11, &s22, lo).unwrap();
        let (narrow, _) = positive_masks(&s11, &s22, hi).unwrap();
        prop_assert!(wide.is_superset_of(&narrow));
        for i in 0..b {
            prop_assert!(narrow.get(i, i));
        }

        let joint = joint_positive_mask(&s11, &s22, hi).unwrap();
        let (m1, m2) = positive_masks(&s11, &s22, hi).unwrap();
        prop_assert!(joint.is_superset_of(&m1));
        prop_assert!(joint.is_superset_of(&m2));
    }

    #[test]
    fn ncs_is_bounded(seed in any::<u64>(), b in 1usize..=12, d in 2usize..=16) {
        let x = instance(seed, b, d);
        let v = ncs_loss(&x.z1, &x.z2, &NcsSpec::new(&x.head)).unwrap().value;
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));

        let id = ProjectionHead::identity(d);
        let same = ncs_loss(&x.z1, &x.z1, &NcsSpec::new(&id)).unwrap().value;
        prop_assert!((same + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn losses_are_finite(
        seed in any::<u64>(),
        b in 1usize..=16,
        d in 2usize..=16,
        tau in tau_strategy(),
        lambda in lambda_strategy(),
        joint in any::<bool>(),
    ) {
        let x = instance(seed, b, d);
        let temp = Temperature::new(tau).unwrap();
        let masks = mv_simcon_masks(&x.z1, &x.z2, &x.zt, lambda, joint).unwrap();
        let spec = NcsSpec::new(&x.head);
        let outs = [
            info_nce(&x.z1, &x.zt, &temp).unwrap(),
            simcon(&x.z1, &x.zt, &masks.view1, &masks.text, &temp, IntraModal::Include).unwrap(),
            mv_simcon_with_masks(&x.z1, &x.z2, &x.zt, &masks, &temp).unwrap(),
            ncs_loss(&x.z1, &x.z2, &spec).unwrap(),
            total_loss(&x.z1, &x.z2, &x.zt, &temp, lambda, &spec).unwrap(),
        ];
        for out in &outs {
            prop_assert!(out.is_finite());
            if let Some(share) = out.diagnostics.diagonal_numerator_share {
                prop_assert!((0.0..=1.0).contains(&share));
            }
        }
    }

    #[test]
    fn lambda_steps_down_once_per_boundary(
        initial in 0.05f64..=1.0,
        step in 0.001f64..0.3,
        mut bounds in prop::collection::vec(1usize..40, 0..5),
    ) {
        bounds.sort_unstable();
        bounds.dedup();
        let sched = LambdaSchedule { initial, step_decrement: step, decay_epochs: bounds.clone(), floor: -1.0 };
        let values: Vec<f64> = (1..=45).map(|e| lambda_at_epoch(&sched, e)).collect();
        prop_assert!(values.windows(2).all(|w| w[1] <= w[0]));
        let drops = values.windows(2).filter(|w| w[1] < w[0]).count();
        prop_assert_eq!(drops, bounds.iter().filter(|&&b| b < 45).count());
        prop_assert!(values.iter().all(|&l| l >= -1.0));
    }

    #[test]
    fn lr_meets_max_at_warmup_end(
        warmup in 1usize..5,
        extra in 1usize..30,
        steps in 1usize..50,
        init in 1e-7f64..1e-4,
        max in 1e-4f64..1e-2,
    ) {
        let sched = LrSchedule { init_lr: init, max_lr: max, warmup_epochs: warmup, total_epochs: warmup + extra, min_lr: 0.0 };
        let junction = warmup * steps - 1;
        prop_assert!((lr_at_step(&sched, junction, steps) - max).abs() <= 1e-12);
        if junction > 0 {
            prop_assert!(lr_at_step(&sched, junction - 1, steps) <= max + 1e-12);
        }
        prop_assert!(lr_at_step(&sched, junction + 1, steps) <= max + 1e-12);
        let first = if junction == 0 { max } else { init };
        prop_assert!((lr_at_step(&sched, 0, steps) - first).abs() <= 1e-18);
    }

    #[test]
    fn eval_metrics_are_fractions(seed in any::<u64>(), n in 1usize..40, d in 2usize..8, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zi = unit(&mut rng, n, d);
        let zt = unit(&mut rng, n, d);
        let protos = unit(&mut rng, k, d);
        let classes: Vec<usize> = (0..n).map(|i| i % k).collect();
        let (a, b) = eval_retrieval(&zi, &zt).unwrap();
        let acc = eval_alignment(&zi, &classes, &protos).unwrap();
        for v in [a, b, acc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simcon::losses::{info_nce, Temperature};
use simcon::numerics::{l2_normalize_rows, Matrix};
use simcon::oracle::oracle_info_nce;
use simcon::oracle_diff::{all_within, oracle_diff, random_trial, trial_diffs, LAMBDAS, TAUS};

#[test]
fn every_tau_lambda_pair_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = Vec::new();
    for t in 0..120 {
        let trial = random_trial(&mut rng, t, 16, 32).unwrap();
        seen.push((trial.tau.to_bits(), trial.lambda.to_bits()));
        for d in trial_diffs(&trial).unwrap() {
            assert!(d < 1e-10, "trial {t}: {d}");
        }
    }
    for tau in TAUS {
        for lambda in LAMBDAS {
            assert!(seen.contains(&(tau.to_bits(), lambda.to_bits())));
        }
    }
}

#[test]
fn several_seeds_agree() {
    for seed in [1, 2, 3] {
        let report = oracle_diff(100, seed).unwrap();
        assert!(all_within(&report, 1e-10), "{report:?}");
        assert!(report.iter().all(|r| r.trials == 100));
    }
}

#[test]
fn orthonormal_pair() {
    let z = l2_normalize_rows(&Matrix::identity(2)).unwrap();
    let temp = Temperature::new(0.07).unwrap();
    let v = info_nce(&z, &z, &temp).unwrap().value;
    let expected = 2.0 * (1.0 + (-1.0f64 / 0.07).exp()).ln();
    assert!((v - oracle_info_nce(&z, &z, 0.07)).abs() < 1e-10);
    assert!((v - expected).abs() < 1e-12);
}

use ibpvae::distributions::kumaraswamy_log_inverse_cdf;
use ibpvae::stickbreaking::{
    sample_prior_mask, stick_breaking_log_pi, IbpPriorConfig, PriorMaskNoise,
};
use ibpvae_testkit::mean_and_stderr;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn draw_log_nu<R: Rng>(rng: &mut R, a: f64, b: f64, k: usize) -> Vec<f64> {
    (0..k)
        .map(|_| kumaraswamy_log_inverse_cdf(a, b, rng.random_range(f64::EPSILON..1.0)))
        .collect()
}

#[test]
fn pi_is_nonincreasing_over_many_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = rng.random_range(0.1..30.0);
        let b = rng.random_range(0.1..5.0);
        let log_pi = stick_breaking_log_pi(&draw_log_nu(&mut rng, a, b, 100)).unwrap();
        assert!(log_pi.windows(2).all(|w| w[1] <= w[0]));
        assert!(log_pi.iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn log_space_matches_direct_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let log_nu = draw_log_nu(&mut rng, 10.0, 1.0, 100);
        let log_pi = stick_breaking_log_pi(&log_nu).unwrap();
        let mut product = 1.0;
        for (k, &l) in log_nu.iter().enumerate() {
            product *= l.exp();
            assert!((log_pi[k].exp() - product).abs() <= 1e-10 * product.max(1e-300) + 1e-300);
        }
    }
}

#[test]
fn mean_activation_follows_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    for &alpha in &[0.5, 10.0, 30.0] {
        let cfg = IbpPriorConfig::new(alpha, 20, 0.5).unwrap();
        let expected = cfg.expected_activation();
        let mut pis: Vec<Vec<f64>> = (0..20).map(|_| Vec::with_capacity(draws)).collect();
        for _ in 0..draws {
            // Beta(α, 1) sticks drawn exactly as Kumaraswamy(α, 1).
            let log_pi = stick_breaking_log_pi(&draw_log_nu(&mut rng, alpha, 1.0, 20)).unwrap();
            for (k, lp) in log_pi.iter().enumerate() {
                pis[k].push(lp.exp());
            }
        }
        for &k in &[1usize, 2, 5, 10, 20] {
            let (m, se) = mean_and_stderr(&pis[k - 1]);
            let target = (alpha / (alpha + 1.0)).powi(k as i32);
            assert!((target - expected[k - 1]).abs() < 1e-15);
            assert!(
                (m - target).abs() < 3.0 * se,
                "alpha={alpha} k={k}: {m} ± {se} vs {target}"
            );
        }
    }
}

#[test]
fn prior_masks_favor_early_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = IbpPriorConfig::new(3.0, 12, 0.1).unwrap();
    let (rows, mut totals) = (50, vec![0.0; 12]);
    for _ in 0..400 {
        let noise = PriorMaskNoise {
            stick_uniform: (0..12)
                .map(|_| rng.random_range(f64::EPSILON..1.0))
                .collect(),
            logistic: (0..rows * 12)
                .map(|_| {
                    let u: f64 = rng.random_range(f64::EPSILON..1.0);
                    u.ln() - (-u).ln_1p()
                })
                .collect(),
        };
        let mask = sample_prior_mask(&cfg, &noise).unwrap();
        for r in mask.chunks(12) {
            for (t, v) in totals.iter_mut().zip(r) {
                *t += v;
            }
        }
    }
    assert!(totals[0] > totals[5] && totals[5] > totals[11]);
}

proptest! {
    #[test]
    fn log_pi_is_monotone_and_exact(log_nu in prop::collection::vec(-5.0f64..0.0, 1..100)) {
        let log_pi = stick_breaking_log_pi(&log_nu).unwrap();
        prop_assert_eq!(log_pi.len(), log_nu.len());
        prop_assert!(log_pi.windows(2).all(|w| w[1] <= w[0]));
        let total: f64 = log_nu.iter().sum();
        prop_assert!((log_pi[log_pi.len() - 1] - total).abs() < 1e-9);
    }

    #[test]
    fn positive_log_sticks_are_rejected(v in 1e-9f64..10.0) {
        prop_assert!(stick_breaking_log_pi(&[-0.1, v]).is_err());
    }
}

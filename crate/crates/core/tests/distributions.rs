use ibpvae::distributions::{
    bin_concrete_log_density, kl_bin_concrete_mc, kl_diag_gaussian_to_std_normal,
    kl_kumaraswamy_beta1_with_grad, kl_kumaraswamy_to_beta, kumaraswamy_log_inverse_cdf,
    logistic_from_uniform, reparam_gaussian, sample_bin_concrete, BinConcreteParams,
    DiagGaussianParams, KumaraswamyParams,
};
use ibpvae_testkit::{integrate_real_line, kumaraswamy_beta1_kl, mean_and_stderr, softplus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn kumaraswamy_kl_matches_quadrature_on_grid() {
    let grid = [0.5, 1.0, 2.0, 5.0, 10.0];
    for &a in &grid {
        for &b in &grid {
            for &alpha in &[1.0, 10.0, 30.0] {
                let closed = kl_kumaraswamy_beta1_with_grad(a, b, alpha).0;
                let oracle = kumaraswamy_beta1_kl(a, b, alpha);
                let err = (closed - oracle).abs();
                assert!(
                    err <= 1e-3 * oracle.abs() + 1e-10,
                    "a={a} b={b} alpha={alpha}: closed {closed} vs quadrature {oracle}"
                );
            }
        }
    }
}

#[test]
fn kumaraswamy_kl_vanishes_at_the_prior() {
    for &alpha in &[0.5, 1.0, 10.0, 30.0] {
        assert_eq!(kl_kumaraswamy_beta1_with_grad(alpha, 1.0, alpha).0, 0.0);
        let q = KumaraswamyParams::from_shapes(&[alpha; 3], &[1.0; 3]).unwrap();
        assert_eq!(kl_kumaraswamy_to_beta(&q, alpha).unwrap(), 0.0);
    }
}

#[test]
fn kumaraswamy_kl_gradient_matches_differences() {
    for &(a, b, alpha) in &[(0.7, 1.3, 5.0), (4.0, 0.6, 30.0), (10.0, 3.0, 1.0)] {
        let (_, da, db) = kl_kumaraswamy_beta1_with_grad(a, b, alpha);
        let h = 1e-6;
        let f = |a, b| kl_kumaraswamy_beta1_with_grad(a, b, alpha).0;
        let fa = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
        let fb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
        assert!((da - fa).abs() < 1e-6 * (1.0 + fa.abs()), "{da} vs {fa}");
        assert!((db - fb).abs() < 1e-6 * (1.0 + fb.abs()), "{db} vs {fb}");
    }
}

#[test]
fn cold_concrete_mean_matches_bernoulli() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &p in &[0.1, 0.5, 0.9] {
        let n = 100_000;
        let params = BinConcreteParams::from_probs(&vec![p; n], 0.01).unwrap();
        let noise: Vec<f64> = (0..n)
            .map(|_| logistic_from_uniform(rng.random_range(f64::EPSILON..1.0)))
            .collect();
        let x = sample_bin_concrete(&params, &noise).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        assert!((mean - p).abs() < 0.01, "p={p}: mean {mean}");
    }
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = DiagGaussianParams::new(vec![0.3, -1.2, 2.0], vec![-0.5, 0.7, -2.0]).unwrap();
    let log_n = |x: f64, m: f64, lv: f64| {
        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp())
    };
    let terms: Vec<f64> = (0..200_000)
        .map(|_| {
            let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparam_gaussian(&q, &eps).unwrap();
            (0..3)
                .map(|j| log_n(z[j], q.mean()[j], q.log_variance()[j]) - log_n(z[j], 0.0, 0.0))
                .sum()
        })
        .collect();
    let (mc, se) = mean_and_stderr(&terms);
    let closed = kl_diag_gaussian_to_std_normal(&q);
    assert!(
        (mc - closed).abs() < 3.0 * se,
        "closed {closed} vs MC {mc} ± {se}"
    );
}

/// `ln` density of the pre-sigmoid binary Concrete, written from the logistic
/// density of `τx − l`.
fn concrete_log_density(x: f64, logit: f64, tau: f64) -> f64 {
    let t = tau * x - logit;
    tau.ln() - t - 2.0 * softplus(-t)
}

#[test]
fn concrete_density_normalizes_and_matches() {
    for &(l, tau) in &[(0.0, 0.5), (2.0, 0.5), (-3.0, 0.1), (1.0, 1.0)] {
        let total = integrate_real_line(|x| concrete_log_density(x, l, tau).exp(), 1e-11);
        assert!((total - 1.0).abs() < 1e-8, "mass {total}");
        for &x in &[-5.0, -0.3, 0.0, 2.5, 40.0] {
            let a = bin_concrete_log_density(x, l, tau);
            let b = concrete_log_density(x, l, tau);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn concrete_kl_monte_carlo_matches_quadrature() {
    let (lq, lp, tq, tp) = (1.5, -0.5, 0.5, 0.5);
    let oracle = integrate_real_line(
        |x| {
            let a = concrete_log_density(x, lq, tq);
            let b = concrete_log_density(x, lp, tp);
            a.exp() * (a - b)
        },
        1e-11,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200_000;
    let q = BinConcreteParams::new(vec![lq], tq).unwrap();
    let p = BinConcreteParams::new(vec![lp], tp).unwrap();
    let samples: Vec<f64> = (0..n)
        .map(|_| (lq + logistic_from_uniform(rng.random_range(f64::EPSILON..1.0))) / tq)
        .collect();
    let terms: Vec<f64> = samples
        .iter()
        .map(|&x| concrete_log_density(x, lq, tq) - concrete_log_density(x, lp, tp))
        .collect();
    let (_, se) = mean_and_stderr(&terms);
    let mc = kl_bin_concrete_mc(&q, &p, &samples).unwrap();
    assert!(
        (mc - oracle).abs() < 3.0 * se,
        "MC {mc} ± {se} vs quadrature {oracle}"
    );
}

proptest! {
    #[test]
    fn kumaraswamy_samples_stay_in_unit_interval(
        log_a in -3.0f64..3.0,
        log_b in -3.0f64..3.0,
        u in 1e-12f64..1.0,
    ) {
        let ln_nu = kumaraswamy_log_inverse_cdf(log_a.exp(), log_b.exp(), u);
        prop_assert!(ln_nu <= 0.0, "ln nu = {ln_nu}");
    }

    #[test]
    fn kumaraswamy_kl_is_nonnegative(a in 0.05f64..50.0, b in 0.05f64..50.0, alpha in 0.1f64..50.0) {
        let kl = kl_kumaraswamy_beta1_with_grad(a, b, alpha).0;
        prop_assert!(kl >= -1e-9, "kl = {kl}");
    }

    #[test]
    fn gaussian_kl_is_nonnegative(m in -5.0f64..5.0, lv in -10.0f64..10.0) {
        let q = DiagGaussianParams::new(vec![m], vec![lv]).unwrap();
        prop_assert!(kl_diag_gaussian_to_std_normal(&q) >= 0.0);
    }

    #[test]
    fn concrete_samples_stay_in_open_interval(
        p in 1e-6f64..(1.0 - 1e-6),
        tau in 0.01f64..2.0,
        u in 1e-15f64..1.0,
    ) {
        let params = BinConcreteParams::from_probs(&[p], tau).unwrap();
        let x = sample_bin_concrete(&params, &[logistic_from_uniform(u)]).unwrap()[0];
        prop_assert!(x > 0.0 && x < 1.0);
    }
}

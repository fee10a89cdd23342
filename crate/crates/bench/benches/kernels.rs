use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ibpvae::data::make_mig_oracle;
use ibpvae::distributions::{
    kl_kumaraswamy_beta1_with_grad, kumaraswamy_log_inverse_cdf, logistic_from_uniform,
    sample_bin_concrete, BinConcreteParams,
};
use ibpvae::mig::{compute_mig, DEFAULT_BINS};
use ibpvae::stickbreaking::stick_breaking_log_pi;
use ibpvae_bench::uniforms;

fn distributions(c: &mut Criterion) {
    c.bench_function("kumaraswamy_kl_100", |b| {
        b.iter(|| {
            (1..=100)
                .map(|i| kl_kumaraswamy_beta1_with_grad(0.1 * i as f64, 2.0, black_box(10.0)).0)
                .sum::<f64>()
        })
    });
    let u = uniforms(100, 1);
    c.bench_function("stick_breaking_k100", |b| {
        b.iter(|| {
            let log_nu: Vec<f64> = u
                .iter()
                .map(|&u| kumaraswamy_log_inverse_cdf(10.0, 1.0, u))
                .collect();
            stick_breaking_log_pi(black_box(&log_nu)).unwrap()
        })
    });
    let n = 10_000;
    let params = BinConcreteParams::from_probs(&vec![0.3; n], 0.5).unwrap();
    let noise: Vec<f64> = uniforms(n, 2)
        .into_iter()
        .map(logistic_from_uniform)
        .collect();
    c.bench_function("bin_concrete_10k", |b| {
        b.iter(|| sample_bin_concrete(black_box(&params), &noise).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mapping: Vec<Option<usize>> = (0..10).map(|j| (j < 5).then_some(j)).collect();
    let o = make_mig_oracle(10_000, 10, &[3, 6, 40, 32, 32], &mapping, 0.1, 3).unwrap();
    c.bench_function("mig_10k_codes_10_dims", |b| {
        b.iter(|| compute_mig(black_box(&o.codes), 10, &o.factors, 5, DEFAULT_BINS).unwrap())
    });
}

criterion_group!(benches, distributions, metrics);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ibpvae::models::ModelKind;
use ibpvae::training::TrainData;
use ibpvae_bench::{binary_batch, colored_mnist_config, dsprites_config, single_batch_trainer};

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    let cases = [
        ("dsprites_ibp_b64", dsprites_config(ModelKind::Ibp), 64),
        (
            "dsprites_gaussian_b64",
            dsprites_config(ModelKind::Gaussian),
            64,
        ),
        (
            "colored_mnist_ibp_b100",
            colored_mnist_config(ModelKind::Ibp),
            100,
        ),
    ];
    for (name, config, rows) in cases {
        let x = binary_batch(rows, config.input_dim, 7);
        let trainer = single_batch_trainer(config, rows);
        group.bench_function(name, |b| {
            b.iter_batched(
                || trainer.clone(),
                |mut t| {
                    t.run_epoch(&TrainData {
                        inputs: &x,
                        labels: None,
                    })
                    .unwrap()
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, steps);
criterion_main!(benches);

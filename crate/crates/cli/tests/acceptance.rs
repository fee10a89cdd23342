//! Acceptance report. Each test checks one numbered criterion, prints a
//! single `criterion N: PASS|FAIL ...` line to stderr (bypassing output
//! capture), and fails when the criterion fails.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ibpvae::autodiff::Graph;
use ibpvae::checkpoint::{decode_checkpoint, encode_checkpoint};
use ibpvae::data::make_mig_oracle;
use ibpvae::decomposition::{estimate_decomposition, DecompositionOptions, TcdPoint};
use ibpvae::distributions::{
    kl_diag_gaussian_to_std_normal, kl_kumaraswamy_beta1_with_grad, kumaraswamy_log_inverse_cdf,
    logistic_from_uniform, reparam_gaussian, sample_bin_concrete, BinConcreteParams,
    DiagGaussianParams,
};
use ibpvae::mig::{compute_mig, DEFAULT_BINS};
use ibpvae::models::{ForwardNoise, ForwardOptions, Model, ModelConfig, ModelKind};
use ibpvae::stickbreaking::stick_breaking_log_pi;
use ibpvae::training::{train, TrainData};
use ibpvae::Tensor;
use ibpvae_cli::commands::{self, Overrides, TrainSummary};
use ibpvae_testkit::{gaussian_2d_vae_terms, kumaraswamy_beta1_kl, mean_and_stderr};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Collect named checks; report once; fail the test if any check failed.
struct Checks {
    criterion: u32,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn new(criterion: u32) -> Self {
        Self {
            criterion,
            start: Instant::now(),
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: String) {
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) {
        let pass = self.failures.is_empty();
        let shown = if pass {
            self.notes.join("; ")
        } else if self.notes.is_empty() {
            self.failures.join("; ")
        } else {
            format!(
                "{}; passed: {}",
                self.failures.join("; "),
                self.notes.join("; ")
            )
        };
        let detail = format!("[{:.1}s] {shown}", self.start.elapsed().as_secs_f64());
        report(self.criterion, pass, &detail);
        assert!(
            pass,
            "criterion {} failed: {}",
            self.criterion,
            self.failures.join("; ")
        );
    }
}

#[test]
fn criterion_1_distribution_kernels() {
    let mut c = Checks::new(1);
    let grid = [0.5, 1.0, 2.0, 5.0, 10.0];
    let mut worst = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            for &alpha in &[1.0, 10.0, 30.0] {
                let closed = kl_kumaraswamy_beta1_with_grad(a, b, alpha).0;
                let oracle = kumaraswamy_beta1_kl(a, b, alpha);
                worst = worst.max((closed - oracle).abs() / oracle.abs().max(1e-300));
            }
        }
    }
    c.check(
        worst < 1e-3,
        format!("Kumaraswamy KL worst relative error {worst:.2e} (< 1e-3)"),
    );
    let at_prior = [1.0, 10.0, 30.0]
        .iter()
        .all(|&alpha| kl_kumaraswamy_beta1_with_grad(alpha, 1.0, alpha).0 == 0.0);
    c.check(at_prior, "KL exactly 0 at (a = alpha, b = 1)".into());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut worst_mean = 0.0f64;
    for &p in &[0.1, 0.5, 0.9] {
        let params = BinConcreteParams::from_probs(&vec![p; n], 0.01).unwrap();
        let noise: Vec<f64> = (0..n)
            .map(|_| logistic_from_uniform(rng.random_range(f64::EPSILON..1.0)))
            .collect();
        let x = sample_bin_concrete(&params, &noise).unwrap();
        worst_mean = worst_mean.max((x.iter().sum::<f64>() / n as f64 - p).abs());
    }
    c.check(
        worst_mean < 0.01,
        format!("Concrete tau=0.01 mean error {worst_mean:.4} (< 0.01)"),
    );

    let q = DiagGaussianParams::new(vec![0.3, -1.2, 2.0], vec![-0.5, 0.7, -2.0]).unwrap();
    let ln_n = |x: f64, m: f64, lv: f64| {
        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - m).powi(2) / lv.exp())
    };
    let terms: Vec<f64> = (0..200_000)
        .map(|_| {
            let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparam_gaussian(&q, &eps).unwrap();
            (0..3)
                .map(|j| ln_n(z[j], q.mean()[j], q.log_variance()[j]) - ln_n(z[j], 0.0, 0.0))
                .sum()
        })
        .collect();
    let (mc, se) = mean_and_stderr(&terms);
    let closed = kl_diag_gaussian_to_std_normal(&q);
    c.check(
        (mc - closed).abs() < 3.0 * se,
        format!(
            "Gaussian KL {closed:.4} vs MC {mc:.4} (3 se = {:.4})",
            3.0 * se
        ),
    );
    c.finish();
}

#[test]
fn criterion_2_stick_breaking() {
    let mut c = Checks::new(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = |rng: &mut ChaCha8Rng, a: f64, b: f64, k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| kumaraswamy_log_inverse_cdf(a, b, rng.random_range(f64::EPSILON..1.0)))
            .collect()
    };
    let mut monotone = true;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(0.1..30.0), rng.random_range(0.1..5.0));
        let log_nu = draw(&mut rng, a, b, 100);
        let log_pi = stick_breaking_log_pi(&log_nu).unwrap();
        monotone &= log_pi.windows(2).all(|w| w[1] <= w[0]);
        let mut product = 1.0;
        for (k, &l) in log_nu.iter().enumerate() {
            product *= l.exp();
            worst = worst.max((log_pi[k].exp() - product).abs());
        }
    }
    c.check(
        monotone,
        "pi nonincreasing over 1000 draws at K = 100".into(),
    );
    c.check(
        worst <= 1e-10,
        format!("log-space vs product max error {worst:.1e}"),
    );

    let draws = 20_000;
    let mut worst_z = 0.0f64;
    for &alpha in &[0.5, 10.0, 30.0] {
        let mut pis: Vec<Vec<f64>> = (0..20).map(|_| Vec::with_capacity(draws)).collect();
        for _ in 0..draws {
            let log_pi = stick_breaking_log_pi(&draw(&mut rng, alpha, 1.0, 20)).unwrap();
            for (k, lp) in log_pi.iter().enumerate() {
                pis[k].push(lp.exp());
            }
        }
        for &k in &[1usize, 2, 5, 10, 20] {
            let (m, se) = mean_and_stderr(&pis[k - 1]);
            let target = (alpha / (alpha + 1.0)).powi(k as i32);
            worst_z = worst_z.max((m - target).abs() / se);
        }
    }
    c.check(
        worst_z < 3.0,
        format!("mean activation worst |z| {worst_z:.2} (< 3)"),
    );
    c.finish();
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut c = Checks::new(3);
    const X: [f64; 6] = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let mut cfg = ModelConfig::mlp(ModelKind::Ibp, 2, 2, vec![]);
    cfg.beta = 2.0;
    cfg.alpha = 3.0;
    cfg.prior_temperature = 0.7;
    cfg.posterior_temperature = 0.4;
    let mut model = Model::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let id = model.params().id(name).unwrap();
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let noise = ForwardNoise::sample(model.config(), 3, &mut ChaCha8Rng::seed_from_u64(4));
    let x = Tensor::new(&[3, 2], X.to_vec()).unwrap();
    let loss = |model: &Model<f64>| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g);
        let pass = model
            .forward(&mut g, &bound, &x, &noise, &ForwardOptions::new(5))
            .unwrap();
        let grads = g.backward(pass.loss);
        let flat = bound
            .vars()
            .iter()
            .zip(model.params().iter())
            .flat_map(|(&v, (_, t))| match grads.get(v) {
                Some(gt) => gt.data().to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect();
        (pass.loss_value, flat)
    };
    let analytic = loss(&model).1;
    let (mut flat, mut worst) = (0, 0.0f64);
    for name in &names {
        let id = model.params().id(name).unwrap();
        for i in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[i];
            let h = 1e-5 * orig.abs().max(1.0);
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&model).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&model).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[flat];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
            flat += 1;
        }
    }
    c.check(
        worst < 1e-4,
        format!("{flat} parameters, worst relative error {worst:.2e} (< 1e-4)"),
    );
    c.finish();
}

#[test]
fn criterion_4_elbo_decomposition() {
    let mut c = Checks::new(4);
    const N: usize = 8;
    const D: usize = 6;
    let data: Vec<f64> = (0..N * D)
        .map(|i| {
            let (r, col) = (i / D, i % D);
            ((r >> (col % 3)) & 1 == (col / 3)) as u8 as f64
        })
        .collect();
    let x = Tensor::new(&[N, D], data).unwrap();
    let mut cfg = ModelConfig::mlp(ModelKind::Gaussian, D, 2, vec![8]);
    cfg.epochs = 300;
    cfg.beta = 0.1;
    cfg.batch_size = N;
    cfg.learning_rate = 1e-2;
    let model = train(
        cfg,
        &TrainData {
            inputs: &x,
            labels: None,
        },
        |_, _| Ok(()),
    )
    .unwrap()
    .model;
    let post = model.posterior(&x).unwrap();
    let oracle = gaussian_2d_vae_terms(x.data(), D, &post.mean, &post.log_var, 160, |codes| {
        model.decode_logits(codes, None).unwrap()
    });
    let opts = DecompositionOptions {
        estimator_batch: N,
        samples_per_point: 40_000,
        eval_points: None,
    };
    let est = estimate_decomposition(&model, &x, &opts, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let tol = 1e-2;
    for (name, e, o) in [
        ("distortion", est.distortion, oracle.distortion),
        ("MI", est.index_code_mi, oracle.index_code_mi),
        ("TC", est.total_correlation, oracle.total_correlation),
        ("dim-KL", est.dimwise_kl, oracle.dimwise_kl),
        (
            "-ELBO (sum of terms)",
            est.negative_elbo(),
            oracle.negative_elbo,
        ),
    ] {
        c.check((e - o).abs() < tol, format!("{name} {e:.4} vs {o:.4}"));
    }
    c.finish();
}

#[test]
fn criterion_5_mig_oracles() {
    let mut c = Checks::new(5);
    let cards = [3, 6, 10];
    let o = make_mig_oracle(10_000, 3, &cards, &[Some(0), Some(1), Some(2)], 0.0, 1).unwrap();
    let r = compute_mig(&o.codes, 3, &o.factors, 3, DEFAULT_BINS).unwrap();
    let worst = r
        .per_factor_gap
        .iter()
        .map(|g| (g - 1.0).abs())
        .fold(0.0, f64::max);
    c.check(
        worst <= 0.02,
        format!("bijective gaps {:.3?}", r.per_factor_gap),
    );
    let o = make_mig_oracle(10_000, 4, &cards, &[None; 4], 0.0, 2).unwrap();
    let r = compute_mig(&o.codes, 4, &o.factors, 3, DEFAULT_BINS).unwrap();
    c.check(r.mig_score < 0.05, format!("noise MIG {:.4}", r.mig_score));
    let o = make_mig_oracle(
        10_000,
        4,
        &cards,
        &[Some(0), Some(0), Some(1), Some(2)],
        0.0,
        3,
    )
    .unwrap();
    let r = compute_mig(&o.codes, 4, &o.factors, 3, DEFAULT_BINS).unwrap();
    c.check(
        r.per_factor_gap[0] < 0.05,
        format!("duplicated-factor gap {:.4}", r.per_factor_gap[0]),
    );
    c.finish();
}

/// Training epochs per dSprites run. One epoch over the 23,040-image set
/// takes about 80 s on one CPU core, so the 18-run sweep fits in
/// roughly 1.5 hours.
const DSPRITES_EPOCHS: usize = 3;
const BETAS: [f64; 3] = [1.0, 5.0, 10.0];
const SEEDS: [u64; 3] = [0, 1, 2];
const MODELS: [ModelKind; 2] = [ModelKind::Ibp, ModelKind::Gaussian];

struct SweepRun {
    model: ModelKind,
    beta: f64,
    seed: u64,
    mig: Option<f64>,
    tcd: TcdPoint,
}

struct Sweep {
    runs: Vec<SweepRun>,
    seconds: f64,
}

impl Sweep {
    fn select(&self, model: ModelKind, beta: f64) -> Vec<&SweepRun> {
        self.runs
            .iter()
            .filter(|r| r.model == model && r.beta == beta)
            .collect()
    }
}

fn write_config(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn overrides(config: &Path) -> Overrides {
    Overrides {
        config: Some(config.to_path_buf()),
        ..Overrides::default()
    }
}

/// Train every (model, β, seed) on strided dSprites through the CLI
/// commands, then score MIG at β = 5 and TC-D for every run.
fn dsprites_sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let root = tempfile::tempdir().unwrap();
        let mut checkpoints = Vec::new();
        let mut keys = Vec::new();
        for &model in &MODELS {
            for &beta in &BETAS {
                for &seed in &SEEDS {
                    let dir = root.path().join(format!("{}-b{beta}-s{seed}", model.as_str()));
                    std::fs::create_dir_all(&dir).unwrap();
                    let config = dir.join("config.toml");
                    write_config(
                        &config,
                        &format!(
                            "model = \"{}\"\ndataset = \"dsprites\"\nseed = {seed}\nbeta = {beta:?}\n\
                             epochs = {DSPRITES_EPOCHS}\noutput_dir = \"{}\"\n\
                             mig_samples = 10000\ntcd_estimator_batch = 1024\ntcd_eval_points = 2000\n",
                            model.as_str(),
                            dir.join("run").display()
                        ),
                    );
                    let t = Instant::now();
                    commands::train(&overrides(&config), None).unwrap();
                    eprintln!(
                        "  trained {} beta {beta} seed {seed} in {:.0}s",
                        model.as_str(),
                        t.elapsed().as_secs_f64()
                    );
                    checkpoints.push(dir.join("run").join(commands::CHECKPOINT_FILE));
                    keys.push((model, beta, seed, config));
                }
            }
        }
        let points = commands::tcd(
            &Overrides {
                out: Some(root.path().join("tcd")),
                ..Overrides::default()
            },
            &checkpoints,
        )
        .unwrap();
        let mut runs = Vec::new();
        for ((model, beta, seed, config), (ck, tcd)) in
            keys.into_iter().zip(checkpoints.iter().zip(points))
        {
            let mig = (beta == 5.0).then(|| {
                let ov = Overrides {
                    out: Some(ck.parent().unwrap().join("mig")),
                    ..overrides(&config)
                };
                commands::eval_mig(&ov, Some(ck)).unwrap().report.mig_score
            });
            runs.push(SweepRun {
                model,
                beta,
                seed,
                mig,
                tcd,
            });
        }
        for r in &runs {
            eprintln!(
                "  {:>8} beta {:>4} seed {}: MIG {}  TC {:.3}  D {:.2}",
                r.model.as_str(),
                r.beta,
                r.seed,
                r.mig.map_or("-".into(), |m| format!("{m:.4}")),
                r.tcd.total_correlation,
                r.tcd.distortion
            );
        }
        Sweep {
            runs,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_6_dsprites_mig_ordering() {
    let sweep = dsprites_sweep();
    let mut c = Checks::new(6);
    let migs = |m| -> Vec<f64> {
        sweep
            .select(m, 5.0)
            .iter()
            .map(|r| r.mig.unwrap())
            .collect()
    };
    let (ibp, gauss) = (migs(ModelKind::Ibp), migs(ModelKind::Gaussian));
    let (mi, mg) = (median(ibp.clone()), median(gauss.clone()));
    c.check(
        mi > mg,
        format!(
            "beta=5, {DSPRITES_EPOCHS} epochs: median MIG ibp {mi:.4} {ibp:.4?} vs gaussian {mg:.4} {gauss:.4?} (sweep {:.0}s)",
            sweep.seconds
        ),
    );
    c.finish();
}

/// Two combined standard errors of the seed means: the noise allowance for
/// the trend and matched-β comparisons.
fn noise_allowance(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_and_stderr(a);
    let (_, sb) = mean_and_stderr(b);
    2.0 * (sa * sa + sb * sb).sqrt()
}

#[test]
fn criterion_7_dsprites_tcd_trend() {
    let sweep = dsprites_sweep();
    let mut c = Checks::new(7);
    let values = |m, beta, f: fn(&TcdPoint) -> f64| -> Vec<f64> {
        sweep.select(m, beta).iter().map(|r| f(&r.tcd)).collect()
    };
    let tc = |p: &TcdPoint| p.total_correlation;
    let dist = |p: &TcdPoint| p.distortion;
    for &m in &MODELS {
        let name = m.as_str();
        let tcs: Vec<Vec<f64>> = BETAS.iter().map(|&b| values(m, b, tc)).collect();
        let ds: Vec<Vec<f64>> = BETAS.iter().map(|&b| values(m, b, dist)).collect();
        let mean = |v: &Vec<f64>| mean_and_stderr(v).0;
        for i in 0..BETAS.len() - 1 {
            let (lo, hi) = (BETAS[i], BETAS[i + 1]);
            let tol = noise_allowance(&tcs[i], &tcs[i + 1]);
            c.check(
                mean(&tcs[i + 1]) <= mean(&tcs[i]) + tol,
                format!(
                    "{name} TC beta {lo}->{hi}: {:.3} -> {:.3} (allowance {tol:.3})",
                    mean(&tcs[i]),
                    mean(&tcs[i + 1])
                ),
            );
            let tol = noise_allowance(&ds[i], &ds[i + 1]);
            c.check(
                mean(&ds[i + 1]) + tol >= mean(&ds[i]),
                format!(
                    "{name} D beta {lo}->{hi}: {:.2} -> {:.2} (allowance {tol:.2})",
                    mean(&ds[i]),
                    mean(&ds[i + 1])
                ),
            );
        }
    }
    for &b in &BETAS {
        let di = values(ModelKind::Ibp, b, dist);
        let dg = values(ModelKind::Gaussian, b, dist);
        let tol = noise_allowance(&di, &dg);
        let (mi, mg) = (mean_and_stderr(&di).0, mean_and_stderr(&dg).0);
        c.check(
            mi <= mg + tol,
            format!("beta {b}: D ibp {mi:.2} vs gaussian {mg:.2} (allowance {tol:.2})"),
        );
    }
    c.finish();
}

fn train_colored_mnist(root: &Path, zeta: f64) -> TrainSummary {
    let dir = root.join(format!("zeta{zeta}"));
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.toml");
    write_config(
        &config,
        &format!(
            "model = \"c_ibp\"\ndataset = \"colored-mnist\"\nzeta = {zeta:?}\nepochs = 20\n\
             warmup_epochs = 5\noutput_dir = \"{}\"\n",
            dir.join("run").display()
        ),
    );
    commands::train(&overrides(&config), None).unwrap()
}

#[test]
fn criterion_8_supervised_head() {
    let mut c = Checks::new(8);
    let root = tempfile::tempdir().unwrap();
    let s = train_colored_mnist(root.path(), 1.0);
    let acc = s.test_accuracy.unwrap();
    // Diagnostic only: the same run with the task loss dominating shows
    // whether the head itself can fit the labels.
    let strong = train_colored_mnist(root.path(), 1000.0);
    c.check(
        acc >= 0.95,
        format!(
            "zeta=1, 20 epochs, {} train / {} test images: test accuracy {acc:.4} (>= 0.95); \
             diagnostic zeta=1000: test accuracy {:.4}",
            s.train_rows,
            s.test_rows,
            strong.test_accuracy.unwrap()
        ),
    );
    c.finish();
}

fn cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ibpvae"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ibpvae {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn criterion_9_reproducibility() {
    let mut c = Checks::new(9);
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let config = |epochs: usize| {
        let p = r.join(format!("oracle{epochs}.toml"));
        write_config(
            &p,
            &format!(
                "model = \"ibp\"\ndataset = \"mig-oracle\"\nseed = 7\noracle_n = 3000\n\
                 epochs = {epochs}\nmig_samples = 3000\ntcd_eval_points = 500\n"
            ),
        );
        p.display().to_string()
    };
    let (c4, c2) = (config(4), config(2));
    let dir = |name: &str| r.join(name).display().to_string();
    cli(&["train", "--config", &c4, "--out", &dir("a")]);
    cli(&["train", "--config", &c4, "--out", &dir("b")]);
    let same =
        |name: &str, a: &str, b: &str| read(r.join(a).join(name)) == read(r.join(b).join(name));
    c.check(
        same(commands::LOG_FILE, "a", "b") && same(commands::CHECKPOINT_FILE, "a", "b"),
        "rerun: identical training log (loss sequences) and checkpoint".into(),
    );

    cli(&["train", "--config", &c2, "--out", &dir("c")]);
    let ck_c = r.join("c").join(commands::CHECKPOINT_FILE);
    cli(&[
        "train",
        "--config",
        &c4,
        "--out",
        &dir("c"),
        "--checkpoint",
        &ck_c.display().to_string(),
    ]);
    c.check(
        same(commands::LOG_FILE, "a", "c") && same(commands::CHECKPOINT_FILE, "a", "c"),
        "2 epochs + resume to 4 matches 4 uninterrupted epochs".into(),
    );

    let ck = r
        .join("a")
        .join(commands::CHECKPOINT_FILE)
        .display()
        .to_string();
    for out in ["m1", "m2"] {
        cli(&["eval-mig", "--checkpoint", &ck, "--out", &dir(out)]);
        cli(&["tcd", "--checkpoint", &ck, "--out", &dir(out)]);
        cli(&["traverse", "--checkpoint", &ck, "--out", &dir(out)]);
        cli(&["trigger", "--checkpoint", &ck, "--out", &dir(out)]);
    }
    for f in [
        commands::MIG_FILE,
        commands::TCD_FILE,
        commands::TRAVERSE_FILE,
        commands::TRIGGER_FILE,
    ] {
        c.check(same(f, "m1", "m2"), format!("rerun: identical {f}"));
    }
    let mig: serde_json::Value =
        serde_json::from_slice(&read(r.join("m1").join(commands::MIG_FILE))).unwrap();
    c.check(
        mig["config_hash"].as_str().is_some_and(|h| h.len() == 64) && mig["seed"] == 7,
        "metric JSON carries config hash and seed".into(),
    );

    let bytes = read(PathBuf::from(&ck));
    let (trainer, meta) = decode_checkpoint::<f32>(&bytes).unwrap();
    c.check(
        encode_checkpoint(&trainer, &meta).unwrap() == bytes,
        "checkpoint save -> load -> save byte-identical".into(),
    );
    c.finish();
}

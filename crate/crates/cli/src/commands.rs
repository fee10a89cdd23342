//! The experiment commands. Each is a pure function of its config,
//! checkpoints and seed to the files it writes.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ibpvae::checkpoint::save_checkpoint;
use ibpvae::decomposition::{tcd_point, write_tcd_csv, TcdPoint};
use ibpvae::mig::{collect_codes, compute_mig, MigReport};
use ibpvae::models::{argmax, Model, ModelKind};
use ibpvae::training::{EpochLog, TrainData, Trainer};
use ibpvae::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetName, ExperimentConfig};
use crate::datasets::{oracle_codes, prepare, PreparedData};
use crate::error::{CliError, CliResult};
use crate::image::{write_png_grid, TileShape};

pub const CHECKPOINT_FILE: &str = "checkpoint.ibpvae";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MIG_FILE: &str = "mig.json";
pub const TCD_FILE: &str = "tcd.csv";
pub const TRAVERSE_FILE: &str = "traverse.png";
pub const TRIGGER_FILE: &str = "trigger.png";

/// Flags shared by every command. Set flags override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset: Option<String>,
}

impl Overrides {
    /// Resolve the effective config: the `--config` file if given, otherwise
    /// `fallback` (typically the config stored in a checkpoint), then the
    /// flag overrides.
    pub fn resolve(&self, fallback: Option<&ExperimentConfig>) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, fallback) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(c)) => c.clone(),
            (None, None) => return Err(CliError::Config("--config is required".into())),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(name) = &self.dataset {
            cfg.dataset = DatasetName::parse(name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Experiment metadata stored in every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    config: ExperimentConfig,
}

struct LoadedCheckpoint {
    trainer: Trainer<f32>,
    config: ExperimentConfig,
    sha256: String,
}

fn load(path: &Path) -> CliResult<LoadedCheckpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let (trainer, meta) = ibpvae::checkpoint::decode_checkpoint::<f32>(&bytes)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| CliError::Io(format!("{}: checkpoint metadata: {e}", path.display())))?;
    Ok(LoadedCheckpoint {
        trainer,
        config: meta.config,
        sha256: sha256_hex(&bytes),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

/// One line of the training log.
#[derive(Serialize)]
struct LogRecord<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    epoch: &'a EpochLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelKind,
    pub dataset: DatasetName,
    pub epochs: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub final_loss: f64,
    pub final_reconstruction_loglik: f64,
    /// Task accuracy on the held-out rows (c_ibp with a split only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_accuracy: Option<f64>,
    /// Posterior-mean stick activation probabilities (masked models only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pi: Option<Vec<f64>>,
}

/// Train from scratch, or continue from `resume`. Writes the checkpoint after
/// every epoch, the JSON-lines log, a copy of the config and a summary.
pub fn train(ov: &Overrides, resume: Option<&Path>) -> CliResult<TrainSummary> {
    let cfg = ov.resolve(None)?;
    let hash = cfg.hash();
    let model_cfg = cfg.model_config()?;
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let data = prepare(&cfg)?;

    let mut trainer = match resume {
        Some(path) => {
            let ck = load(path)?;
            // Only the epoch count may differ, so a run can be extended.
            let mut stored = ck.config.clone();
            stored.epochs = cfg.epochs;
            if stored.hash() != hash {
                return Err(CliError::Config(format!(
                    "{} was trained with a different config (hash {})",
                    path.display(),
                    ck.config.hash()
                )));
            }
            let mut trainer = ck.trainer;
            if trainer.epoch > model_cfg.epochs {
                return Err(CliError::Config(format!(
                    "{} has already completed {} epochs, more than the configured {}",
                    path.display(),
                    trainer.epoch,
                    model_cfg.epochs
                )));
            }
            trainer.model.set_epochs(model_cfg.epochs);
            trainer
        }
        None => Trainer::<f32>::new(model_cfg)?,
    };
    write_file(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    // The output directory is left out so checkpoints do not depend on
    // where they were written.
    let mut stored = cfg.clone();
    stored.output_dir = ExperimentConfig::new(cfg.model, cfg.dataset).output_dir;
    let meta = serde_json::to_value(CheckpointMeta {
        config_hash: hash.clone(),
        config: stored,
    })?;

    // Rewrite the log from the checkpoint history so a resumed run's log
    // matches an uninterrupted one.
    let log_path = out.join(LOG_FILE);
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path)
            .map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?,
    );
    let record = |e: &EpochLog| -> CliResult<Vec<u8>> {
        let mut line = serde_json::to_vec(&LogRecord {
            config_hash: &hash,
            seed: cfg.seed,
            epoch: e,
        })?;
        line.push(b'\n');
        Ok(line)
    };
    for e in &trainer.history {
        log.write_all(&record(e)?)?;
    }
    log.flush()?;

    let inputs = data.rows_f32(&data.train_rows);
    let labels = data.labels_of(&data.train_rows);
    let train_data = TrainData {
        inputs: &inputs,
        labels: (cfg.model == ModelKind::CIbp).then_some(labels.as_slice()),
    };
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut sink_err = None;
    let result = trainer.fit(&train_data, |t, e| {
        let step = (|| -> CliResult<()> {
            log.write_all(&record(e)?)?;
            log.flush()?;
            save_checkpoint(&ck_path, t, &meta)?;
            Ok(())
        })();
        eprintln!(
            "epoch {:>4}  loss {:>12.4}  recon {:>12.4}  kl_z {:>9.4}  kl_a {:>9.4}{}",
            e.epoch,
            e.loss,
            e.reconstruction_loglik,
            e.kl_z,
            e.kl_a,
            e.task_acc
                .map(|a| format!("  task_acc {a:.4}"))
                .unwrap_or_default()
        );
        step.map_err(|err| {
            let msg = err.to_string();
            sink_err = Some(err);
            ibpvae::Error::Config(msg)
        })
    });
    if let Some(err) = sink_err {
        return Err(err);
    }
    result?;
    if !ck_path.exists() {
        save_checkpoint(&ck_path, &trainer, &meta)?;
    }

    let model = &trainer.model;
    let accuracy = |rows: &[usize]| -> CliResult<Option<f64>> {
        if cfg.model != ModelKind::CIbp || rows.is_empty() {
            return Ok(None);
        }
        task_accuracy(model, &data, rows).map(Some)
    };
    let last = trainer.history.last();
    let summary = TrainSummary {
        config_hash: hash.clone(),
        seed: cfg.seed,
        model: cfg.model,
        dataset: cfg.dataset,
        epochs: trainer.epoch,
        train_rows: data.train_rows.len(),
        test_rows: data.test_rows.len(),
        final_loss: last.map_or(f64::NAN, |e| e.loss),
        final_reconstruction_loglik: last.map_or(f64::NAN, |e| e.reconstruction_loglik),
        test_accuracy: accuracy(&data.test_rows)?,
        train_accuracy: accuracy(&data.train_rows)?,
        pi: model.posterior_mean_pi(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Fraction of `rows` whose task-head argmax equals the label.
pub fn task_accuracy(model: &Model<f32>, data: &PreparedData, rows: &[usize]) -> CliResult<f64> {
    let post = model.posterior(&data.rows_f32(rows))?;
    let logits = post
        .task_logits
        .ok_or_else(|| CliError::Config("model has no task head".into()))?;
    let c = logits.len() / rows.len();
    let hits = logits
        .chunks(c)
        .zip(rows)
        .filter(|(l, &r)| argmax(l) == data.labels[r])
        .count();
    Ok(hits as f64 / rows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub sha256: String,
    pub config_hash: String,
    pub model: ModelKind,
    pub beta: f64,
    pub epoch: usize,
}

impl CheckpointInfo {
    fn of(ck: &LoadedCheckpoint) -> Self {
        Self {
            sha256: ck.sha256.clone(),
            config_hash: ck.config.hash(),
            model: ck.trainer.model.kind(),
            beta: ck.trainer.model.config().beta,
            epoch: ck.trainer.epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigOutput {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: DatasetName,
    /// `None` when raw oracle codes were scored.
    pub checkpoint: Option<CheckpointInfo>,
    pub report: MigReport,
}

/// MIG of a checkpoint's deterministic codes on `mig_samples` images, or of
/// the raw codes of the `mig-oracle` dataset when no checkpoint is given.
pub fn eval_mig(ov: &Overrides, checkpoint: Option<&Path>) -> CliResult<MigOutput> {
    let ck = checkpoint.map(load).transpose()?;
    let cfg = ov.resolve(ck.as_ref().map(|c| &c.config))?;
    let mut report = match &ck {
        Some(ck) => {
            let data = prepare(&cfg)?;
            let (codes, factors) =
                collect_codes(&ck.trainer.model, &data.dataset, cfg.mig_samples, cfg.seed)?;
            compute_mig(
                &codes,
                ck.trainer.model.latent_dim(),
                &factors,
                data.dataset.num_factors(),
                cfg.mig_bins,
            )?
        }
        None => {
            if cfg.dataset != DatasetName::MigOracle {
                return Err(CliError::Config(
                    "eval-mig without --checkpoint scores mig-oracle codes only".into(),
                ));
            }
            let (codes, k, factors, f) = oracle_codes(&cfg)?;
            compute_mig(&codes, k, &factors, f, cfg.mig_bins)?
        }
    };
    report.seed = Some(cfg.seed);
    let output = MigOutput {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset: cfg.dataset,
        checkpoint: ck.as_ref().map(CheckpointInfo::of),
        report,
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(MIG_FILE), &output)?;
    Ok(output)
}

/// One TC-D point per checkpoint, evaluated on its own training data.
/// Metric options and the estimator seed come from the effective config.
pub fn tcd(ov: &Overrides, checkpoints: &[PathBuf]) -> CliResult<Vec<TcdPoint>> {
    if checkpoints.is_empty() {
        return Err(CliError::Config(
            "tcd needs at least one --checkpoint".into(),
        ));
    }
    let loaded = checkpoints
        .iter()
        .map(|p| load(p))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = ov.resolve(Some(&loaded[0].config))?;
    let opts = cfg.decomposition_options();
    let mut cache: HashMap<String, PreparedData> = HashMap::new();
    let mut points = Vec::with_capacity(loaded.len());
    for ck in &loaded {
        let mut data_cfg = ck.config.clone();
        if ov.dataset.is_some() {
            data_cfg.dataset = cfg.dataset;
        }
        let key = dataset_key(&data_cfg);
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), prepare(&data_cfg)?);
        }
        let data = &cache[&key];
        let inputs: Tensor<f32> = data.rows_f32(&data.train_rows);
        points.push(tcd_point(&ck.trainer.model, &inputs, &opts, cfg.seed)?);
    }
    let mut csv = Vec::new();
    writeln!(csv, "# config_hash={}", cfg.hash())?;
    writeln!(csv, "# seed={}", cfg.seed)?;
    for (i, ck) in loaded.iter().enumerate() {
        writeln!(
            csv,
            "# checkpoint[{i}] sha256={} config_hash={}",
            ck.sha256,
            ck.config.hash()
        )?;
    }
    write_tcd_csv(&mut csv, &points)?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(TCD_FILE), &csv)?;
    Ok(points)
}

/// Identity of the data a config produces, ignoring model and metric keys.
fn dataset_key(cfg: &ExperimentConfig) -> String {
    serde_json::json!([
        cfg.dataset,
        cfg.data_seed,
        cfg.dsprites_path,
        cfg.dsprites_stride,
        cfg.mnist_images,
        cfg.mnist_labels,
        cfg.test_fraction,
        cfg.train_limit,
        cfg.oracle_n,
        cfg.oracle_cardinalities,
        cfg.oracle_mapping,
        cfg.oracle_noise,
    ])
    .to_string()
}

fn sample_image(cfg: &ExperimentConfig, data: &PreparedData) -> CliResult<Vec<f32>> {
    if cfg.sample_index >= data.dataset.len() {
        return Err(CliError::Config(format!(
            "sample_index {} out of range for {} images",
            cfg.sample_index,
            data.dataset.len()
        )));
    }
    Ok(data.dataset.images.row(cfg.sample_index).to_vec())
}

fn png_text(
    cfg: &ExperimentConfig,
    command: &str,
    ck: &LoadedCheckpoint,
) -> Vec<(&'static str, String)> {
    vec![
        ("command", command.to_string()),
        ("config_hash", cfg.hash()),
        ("seed", cfg.seed.to_string()),
        ("checkpoint_sha256", ck.sha256.clone()),
    ]
}

fn tile_shape(data: &PreparedData) -> TileShape {
    TileShape {
        height: data.dataset.height,
        width: data.dataset.width,
        channels: data.dataset.channels,
    }
}

/// Grid with one row per traversed dimension: the input image, then
/// `traverse_steps` decodings as that loading sweeps `traverse_range`.
pub fn traverse(ov: &Overrides, checkpoint: &Path) -> CliResult<PathBuf> {
    let ck = load(checkpoint)?;
    let cfg = ov.resolve(Some(&ck.config))?;
    let data = prepare(&cfg)?;
    let x = sample_image(&cfg, &data)?;
    let model = &ck.trainer.model;
    let dims = cfg
        .traverse_dims
        .clone()
        .unwrap_or_else(|| (0..model.latent_dim()).collect());
    let [lo, hi] = cfg.traverse_range;
    let mut tiles = Vec::new();
    for &d in &dims {
        tiles.push(x.iter().map(|&v| v as f64).collect());
        tiles.extend(model.latent_traversal(&x, d, lo, hi, cfg.traverse_steps)?);
    }
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(TRAVERSE_FILE);
    write_png_grid(
        &path,
        &tiles,
        dims.len(),
        cfg.traverse_steps + 1,
        tile_shape(&data),
        &png_text(&cfg, "traverse", &ck),
    )?;
    Ok(path)
}

/// Triptych: input, reconstruction, and reconstruction with `trigger_dim`
/// switched off.
pub fn trigger(ov: &Overrides, checkpoint: &Path) -> CliResult<PathBuf> {
    let ck = load(checkpoint)?;
    let cfg = ov.resolve(Some(&ck.config))?;
    let data = prepare(&cfg)?;
    let x = sample_image(&cfg, &data)?;
    let (recon, off) = ck.trainer.model.trigger_unit(&x, cfg.trigger_dim)?;
    let tiles = vec![x.iter().map(|&v| v as f64).collect(), recon, off];
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join(TRIGGER_FILE);
    write_png_grid(
        &path,
        &tiles,
        1,
        3,
        tile_shape(&data),
        &png_text(&cfg, "trigger", &ck),
    )?;
    Ok(path)
}

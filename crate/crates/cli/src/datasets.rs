//! Resolve a dataset identifier into images, factors, labels and a split.

use std::path::Path;

use ibpvae::data::{
    build_colored_mnist, bundled_digits, load_dsprites, make_mig_oracle, read_colored_mnist_cache,
    render_dsprites, split_indices, write_colored_mnist_cache, ColoredMnist, FactorDataset,
    MnistSource, MNIST_SIDE,
};
use ibpvae::Tensor;

use crate::config::{DatasetName, ExperimentConfig};
use crate::error::{CliError, CliResult};

// Offsets keep the split and subset draws independent of the color draws,
// which use `data_seed` itself.
const SPLIT_SEED_OFFSET: u64 = 1;
const LIMIT_SEED_OFFSET: u64 = 2;

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: FactorDataset,
    /// Class label of every row: the first factor.
    pub labels: Vec<usize>,
    pub train_rows: Vec<usize>,
    /// Held-out rows (empty when the dataset has no split).
    pub test_rows: Vec<usize>,
}

impl PreparedData {
    pub fn rows_f32(&self, rows: &[usize]) -> Tensor<f32> {
        ibpvae::data::select_rows(&self.dataset.images, rows)
    }

    pub fn labels_of(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// A dataset view restricted to `rows`.
    pub fn subset(&self, rows: &[usize]) -> FactorDataset {
        let d = &self.dataset;
        FactorDataset {
            images: self.rows_f32(rows),
            height: d.height,
            width: d.width,
            channels: d.channels,
            factor_values: rows.iter().flat_map(|&r| d.factors(r).to_vec()).collect(),
            factor_names: d.factor_names.clone(),
            factor_cardinalities: d.factor_cardinalities.clone(),
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<PreparedData> {
    let dataset = match cfg.dataset {
        DatasetName::Dsprites => match &cfg.dsprites_path {
            Some(path) => load_dsprites(path, &cfg.stride())?,
            None => render_dsprites(&cfg.stride())?,
        },
        DatasetName::ColoredMnist => colored_mnist_dataset(&colored_mnist(cfg)?)?,
        DatasetName::MigOracle => oracle_dataset(cfg)?,
    };
    dataset.validate()?;
    let n = dataset.len();
    let labels: Vec<usize> = (0..n).map(|r| dataset.factors(r)[0]).collect();
    let (mut train_rows, test_rows) = match cfg.dataset {
        DatasetName::ColoredMnist => split_indices(
            n,
            cfg.test_fraction,
            cfg.data_seed.wrapping_add(SPLIT_SEED_OFFSET),
        ),
        _ => ((0..n).collect(), Vec::new()),
    };
    if let Some(limit) = cfg.train_limit {
        if limit == 0 {
            return Err(CliError::Config("train_limit must be >= 1".into()));
        }
        if limit < train_rows.len() {
            let mut rng =
                ibpvae::training::train_rng(cfg.data_seed.wrapping_add(LIMIT_SEED_OFFSET));
            let mut keep = rand::seq::index::sample(&mut rng, train_rows.len(), limit).into_vec();
            keep.sort_unstable();
            train_rows = keep.into_iter().map(|i| train_rows[i]).collect();
        }
    }
    Ok(PreparedData {
        dataset,
        labels,
        train_rows,
        test_rows,
    })
}

fn colored_mnist(cfg: &ExperimentConfig) -> CliResult<ColoredMnist> {
    let (source, tag) = match (&cfg.mnist_images, &cfg.mnist_labels) {
        (Some(images), Some(labels)) => (MnistSource::from_idx_files(images, labels)?, "idx"),
        _ => (bundled_digits(), "bundled"),
    };
    let Some(dir) = cfg.cache_dir() else {
        return Ok(build_colored_mnist(&source, cfg.data_seed));
    };
    let path = dir.join(format!(
        "colored-mnist-{tag}-{}-seed{}.bin",
        source.len(),
        cfg.data_seed
    ));
    if let Ok(bytes) = std::fs::read(&path) {
        let cached = read_colored_mnist_cache(&bytes)?;
        if cached.seed == cfg.data_seed && cached.digits == source.labels {
            return Ok(cached);
        }
    }
    let built = build_colored_mnist(&source, cfg.data_seed);
    write_cache(&dir, &path, &built)?;
    Ok(built)
}

fn write_cache(dir: &Path, path: &Path, data: &ColoredMnist) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    write_colored_mnist_cache(std::io::BufWriter::new(std::fs::File::create(&tmp)?), data)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn colored_mnist_dataset(cm: &ColoredMnist) -> CliResult<FactorDataset> {
    Ok(FactorDataset {
        images: Tensor::new(&[cm.len(), ColoredMnist::DIM], cm.inputs.clone())?,
        height: MNIST_SIDE,
        width: MNIST_SIDE,
        channels: 3,
        factor_values: cm
            .digits
            .iter()
            .zip(&cm.colors)
            .flat_map(|(&d, &c)| [d as usize, c as usize])
            .collect(),
        factor_names: vec!["digit".into(), "color".into()],
        factor_cardinalities: vec![10, 4],
    })
}

/// Oracle codes squashed through a sigmoid, one image row of `K` pixels.
fn oracle_dataset(cfg: &ExperimentConfig) -> CliResult<FactorDataset> {
    let mapping = cfg.oracle_mapping()?;
    let k = mapping.len();
    let o = make_mig_oracle(
        cfg.oracle_n,
        k,
        &cfg.oracle_cardinalities,
        &mapping,
        cfg.oracle_noise,
        cfg.data_seed,
    )?;
    let pixels = o
        .codes
        .iter()
        .map(|&c| (1.0 / (1.0 + (-c).exp())) as f32)
        .collect();
    Ok(FactorDataset {
        images: Tensor::new(&[cfg.oracle_n, k], pixels)?,
        height: 1,
        width: k,
        channels: 1,
        factor_values: o.factors,
        factor_names: (0..cfg.oracle_cardinalities.len())
            .map(|i| format!("factor_{i}"))
            .collect(),
        factor_cardinalities: cfg.oracle_cardinalities.clone(),
    })
}

/// Raw oracle codes and factors, for scoring MIG without a model.
pub fn oracle_codes(cfg: &ExperimentConfig) -> CliResult<(Vec<f64>, usize, Vec<usize>, usize)> {
    let mapping = cfg.oracle_mapping()?;
    let o = make_mig_oracle(
        cfg.oracle_n,
        mapping.len(),
        &cfg.oracle_cardinalities,
        &mapping,
        cfg.oracle_noise,
        cfg.data_seed,
    )?;
    Ok((o.codes, o.k_dims, o.factors, cfg.oracle_cardinalities.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ibpvae::models::ModelKind;

    #[test]
    fn colored_mnist_split_partitions_rows() {
        let cfg = ExperimentConfig::new(ModelKind::CIbp, DatasetName::ColoredMnist);
        let d = prepare(&cfg).unwrap();
        assert_eq!(d.dataset.len(), 1797);
        let mut all: Vec<usize> = d.train_rows.iter().chain(&d.test_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1797).collect::<Vec<_>>());
        assert_eq!(d.test_rows.len(), 359);
    }

    #[test]
    fn cache_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(ModelKind::Ibp, DatasetName::ColoredMnist);
        cfg.cache_dir = Some(dir.path().to_path_buf());
        let a = prepare(&cfg).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = prepare(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn oracle_and_limit() {
        let mut cfg = ExperimentConfig::new(ModelKind::Ibp, DatasetName::MigOracle);
        cfg.oracle_n = 100;
        cfg.train_limit = Some(30);
        let d = prepare(&cfg).unwrap();
        assert_eq!(d.dataset.images.shape(), &[100, 4]);
        assert_eq!(d.train_rows.len(), 30);
        assert!(d.train_rows.windows(2).all(|w| w[0] < w[1]));
        let sub = d.subset(&d.train_rows);
        assert_eq!(sub.len(), 30);
        sub.validate().unwrap();
    }
}

//! Datasets: dSprites with ground-truth factors, colored MNIST, and synthetic
//! codes for validating the MIG metric.

mod dsprites;
mod mnist;
mod npy;
mod oracle;

pub use dsprites::{
    load_dsprites, render_dsprites, DspritesStride, DSPRITES_CARDINALITIES, DSPRITES_FACTORS,
    DSPRITES_FULL_SIZE,
};
pub use mnist::{
    build_colored_mnist, bundled_digits, read_colored_mnist_cache, read_idx_images,
    read_idx_labels, write_colored_mnist_cache, Color, ColoredMnist, MnistSource, MNIST_SIDE,
};
pub use npy::{npy_header_bytes, parse_npy_header, NpyHeader};
pub use oracle::{make_mig_oracle, MigOracle};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with integer ground-truth factors.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDataset {
    /// `[N, C·H·W]`, channel-major per image, values in [0, 1].
    pub images: Tensor<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `N × F`, row-major.
    pub factor_values: Vec<usize>,
    pub factor_names: Vec<String>,
    pub factor_cardinalities: Vec<usize>,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn factors(&self, n: usize) -> &[usize] {
        let f = self.num_factors();
        &self.factor_values[n * f..(n + 1) * f]
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let f = self.num_factors();
        let bad = |msg: String| Err(Error::Format(msg));
        if self.images.cols() != self.channels * self.height * self.width {
            return bad(format!(
                "image rows of {} values do not match {}x{}x{}",
                self.images.cols(),
                self.channels,
                self.height,
                self.width
            ));
        }
        if self.factor_cardinalities.len() != f || self.factor_values.len() != n * f {
            return bad("factor arrays are inconsistent with the image count".into());
        }
        for (i, row) in self.factor_values.chunks(f.max(1)).enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if v >= self.factor_cardinalities[k] {
                    return bad(format!(
                        "image {i}: factor {} = {v} exceeds cardinality {}",
                        self.factor_names[k], self.factor_cardinalities[k]
                    ));
                }
            }
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("pixel values outside [0, 1]".into());
        }
        Ok(())
    }
}

/// Deterministic shuffled split into (train, test) row indices.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::training::train_rng(seed));
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = idx.split_off(n - n_test);
    (idx, test)
}

/// Gather rows of a `[N, D]` tensor.
pub fn select_rows<T: crate::tensor::Real>(x: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let d = x.cols();
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::new(&[rows.len(), d], out).expect("row gather keeps width")
}

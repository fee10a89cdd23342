//! Synthetic codes with known factor dependence, for validating MIG.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MigOracle {
    /// `n × k_dims`, row-major.
    pub codes: Vec<f64>,
    /// `n × F`, row-major.
    pub factors: Vec<usize>,
    pub k_dims: usize,
}

/// Draw `n` factor vectors uniformly over `factor_cardinalities`. Code
/// dimension `j` equals factor `mapping[j]` (as a number) plus
/// `noise_scale · N(0, 1)`, or pure `N(0, 1)` noise when `mapping[j]` is
/// `None`.
pub fn make_mig_oracle(
    n: usize,
    k_dims: usize,
    factor_cardinalities: &[usize],
    mapping: &[Option<usize>],
    noise_scale: f64,
    seed: u64,
) -> Result<MigOracle> {
    if k_dims == 0 || n == 0 {
        return Err(Error::InvalidParameter("n and k_dims must be >= 1".into()));
    }
    if mapping.len() != k_dims {
        return Err(Error::ShapeMismatch(format!(
            "mapping has {} entries for {k_dims} dims",
            mapping.len()
        )));
    }
    let f = factor_cardinalities.len();
    if factor_cardinalities.contains(&0) || mapping.iter().flatten().any(|&m| m >= f) {
        return Err(Error::InvalidParameter(
            "mapping or cardinalities out of range".into(),
        ));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::InvalidParameter("noise_scale must be >= 0".into()));
    }
    let mut rng = crate::training::train_rng(seed);
    let mut factors = Vec::with_capacity(n * f);
    let mut codes = Vec::with_capacity(n * k_dims);
    for _ in 0..n {
        let row: Vec<usize> = factor_cardinalities
            .iter()
            .map(|&c| rng.random_range(0..c))
            .collect();
        for m in mapping {
            let e: f64 = rng.sample(StandardNormal);
            codes.push(match m {
                Some(k) => row[*k] as f64 + noise_scale * e,
                None => e,
            });
        }
        factors.extend(row);
    }
    Ok(MigOracle {
        codes,
        factors,
        k_dims,
    })
}

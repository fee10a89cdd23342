//! Mutual information gap (MIG) between learned codes and ground-truth factors.
//!
//! Each code dimension is discretized into equal-occupancy bins by rank (ties
//! share a bin), and mutual information is the plug-in estimate from the
//! joint histogram. The gap for factor `k` is `(I_top − I_second) / H(v_k)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::FactorDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigReport {
    pub mig_score: f64,
    pub per_factor_gap: Vec<f64>,
    /// `mi_matrix[j][k]`: information (nats) of code dim `j` about factor `k`.
    pub mi_matrix: Vec<Vec<f64>>,
    pub factor_entropies: Vec<f64>,
    pub bins: usize,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

/// Bin index of every entry: `floor(r · bins / N)` where `r` is the rank of
/// the first element of the entry's tie group.
pub fn equal_occupancy_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut first = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[i] != values[order[rank - 1]] {
            first = rank;
        }
        out[i] = first * bins / n;
    }
    out
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information of two discrete label vectors.
pub fn discrete_mutual_information(a: &[usize], a_card: usize, b: &[usize], b_card: usize) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0usize; a_card * b_card];
    let mut ca = vec![0usize; a_card];
    let mut cb = vec![0usize; b_card];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * b_card + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let mi = entropy(&ca, n) + entropy(&cb, n) - entropy(&joint, n);
    mi.max(0.0)
}

/// MIG of codes `N × K` against factors `N × F` (both row-major).
pub fn compute_mig(
    codes: &[f64],
    k: usize,
    factors: &[usize],
    f: usize,
    bins: usize,
) -> Result<MigReport> {
    if k == 0 || f == 0 || bins < 2 {
        return Err(Error::InvalidParameter(
            "need at least one code dim, one factor and two bins".into(),
        ));
    }
    if !codes.len().is_multiple_of(k)
        || !factors.len().is_multiple_of(f)
        || codes.len() / k != factors.len() / f
    {
        return Err(Error::ShapeMismatch(format!(
            "{} code values (K = {k}) vs {} factor values (F = {f})",
            codes.len(),
            factors.len()
        )));
    }
    let n = codes.len() / k;
    if n < bins {
        return Err(Error::Precondition(format!("{n} samples for {bins} bins")));
    }
    if codes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("codes contain non-finite values".into()));
    }

    let mut factor_cols = Vec::with_capacity(f);
    let mut cards = Vec::with_capacity(f);
    let mut entropies = Vec::with_capacity(f);
    for c in 0..f {
        let mut dense = BTreeMap::new();
        for r in 0..n {
            let next = dense.len();
            dense.entry(factors[r * f + c]).or_insert(next);
        }
        if dense.len() < 2 {
            return Err(Error::Precondition(format!(
                "factor column {c} is constant; its entropy is zero"
            )));
        }
        // Remap in sorted order so results do not depend on row order.
        for (i, v) in dense.values_mut().enumerate() {
            *v = i;
        }
        let col: Vec<usize> = (0..n).map(|r| dense[&factors[r * f + c]]).collect();
        let mut counts = vec![0usize; dense.len()];
        col.iter().for_each(|&v| counts[v] += 1);
        entropies.push(entropy(&counts, n as f64));
        cards.push(dense.len());
        factor_cols.push(col);
    }

    let mut mi_matrix = Vec::with_capacity(k);
    let mut column = vec![0.0; n];
    for j in 0..k {
        for r in 0..n {
            column[r] = codes[r * k + j];
        }
        let binned = equal_occupancy_bins(&column, bins);
        mi_matrix.push(
            (0..f)
                .map(|c| discrete_mutual_information(&binned, bins, &factor_cols[c], cards[c]))
                .collect::<Vec<f64>>(),
        );
    }

    let per_factor_gap: Vec<f64> = (0..f)
        .map(|c| {
            let mut col: Vec<f64> = mi_matrix.iter().map(|row| row[c]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            let second = col.get(1).copied().unwrap_or(0.0);
            ((col[0] - second) / entropies[c]).clamp(0.0, 1.0)
        })
        .collect();
    let mig_score = per_factor_gap.iter().sum::<f64>() / f as f64;
    Ok(MigReport {
        mig_score,
        per_factor_gap,
        mi_matrix,
        factor_entropies: entropies,
        bins,
        n_samples: n,
        seed: None,
    })
}

/// Deterministic codes `y` from [`Model::eval_encode`] for `sample_count`
/// images drawn without replacement (all images, in order, if `sample_count`
/// is at least the dataset size). Returns `(codes N × K, factors N × F)`.
pub fn collect_codes<T: Real>(
    model: &Model<T>,
    dataset: &FactorDataset,
    sample_count: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = dataset.len();
    if sample_count == 0 || n == 0 {
        return Err(Error::InvalidParameter(
            "sample_count and dataset must be non-empty".into(),
        ));
    }
    let rows: Vec<usize> = if sample_count >= n {
        (0..n).collect()
    } else {
        let mut rng = crate::training::train_rng(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, sample_count).into_vec();
        idx.sort_unstable();
        idx
    };
    let d = dataset.images.cols();
    let mut x = Vec::with_capacity(rows.len() * d);
    let mut factors = Vec::with_capacity(rows.len() * dataset.num_factors());
    for &r in &rows {
        x.extend(dataset.images.row(r).iter().map(|&v| T::lit(v as f64)));
        factors.extend_from_slice(dataset.factors(r));
    }
    let code = model.eval_encode(&Tensor::new(&[rows.len(), d], x)?)?;
    Ok((code.y, factors))
}

//! Decomposition of the averaged KL term of the ELBO into index-code mutual
//! information, total correlation and dimension-wise KL, plus the distortion.
//!
//! Latent densities live in a space where they are tractable: the loading
//! `a_j` for the Gaussian model, and the pair (pre-sigmoid mask `s_j`,
//! loading `a_j`) for IBP models. Given `x` the posterior factorizes over `j`
//! in both cases. Sticks are held at their posterior mean.
//!
//! The aggregate posterior `q(y) = (1/N) Σ_n q(y | x_n)` is estimated by
//! stratified minibatch sampling: the batch holds the datapoint that produced
//! the sample plus `M − 1` others drawn without replacement, weighted so the
//! estimate is unbiased and exact when `M = N`.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{bin_concrete_log_density, gaussian_log_density, logistic_from_uniform};
use crate::error::{Error, Result};
use crate::models::{bernoulli_loglik, Model, ModelKind, Posterior};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionOptions {
    /// Minibatch size `M` of the marginal estimator (clamped to `N`).
    pub estimator_batch: usize,
    /// Posterior samples drawn per evaluated datapoint.
    pub samples_per_point: usize,
    /// Evaluate on a random subset of this many datapoints (all if `None`).
    pub eval_points: Option<usize>,
}

impl Default for DecompositionOptions {
    fn default() -> Self {
        Self {
            estimator_batch: 1024,
            samples_per_point: 1,
            eval_points: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcDecomposition {
    /// Negative average reconstruction log-likelihood.
    pub distortion: f64,
    pub total_correlation: f64,
    pub dimwise_kl: f64,
    pub index_code_mi: f64,
    pub n_data: usize,
    /// Effective estimator batch after clamping to `n_data`.
    pub estimator_batch: usize,
    pub samples: usize,
}

impl TcDecomposition {
    /// `distortion + MI + TC + dimension-wise KL`, an estimate of `−ELBO`.
    pub fn negative_elbo(&self) -> f64 {
        self.distortion + self.index_code_mi + self.total_correlation + self.dimwise_kl
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-dimension posterior log-densities for one sampled code.
struct Densities<'a> {
    post: &'a Posterior,
    tau_q: f64,
    tau_p: f64,
}

impl Densities<'_> {
    /// `ln q(y_j | x_m)` for each `j`, written into `out`.
    fn conditional(&self, m: usize, s: Option<&[f64]>, a: &[f64], out: &mut [f64]) {
        let k = self.post.dim;
        let mean = &self.post.mean[m * k..(m + 1) * k];
        let lv = &self.post.log_var[m * k..(m + 1) * k];
        for j in 0..k {
            out[j] = gaussian_log_density(a[j], mean[j], lv[j]);
        }
        if let (Some(s), Some(logits)) = (s, &self.post.mask_logits) {
            let logits = &logits[m * k..(m + 1) * k];
            for j in 0..k {
                out[j] += bin_concrete_log_density(s[j], logits[j], self.tau_q);
            }
        }
    }

    /// `ln p(y_j)` under the factorized prior.
    fn prior(&self, s: Option<&[f64]>, a: &[f64], out: &mut [f64]) {
        for j in 0..self.post.dim {
            out[j] = gaussian_log_density(a[j], 0.0, 0.0);
        }
        if let (Some(s), Some(logits)) = (s, &self.post.prior_logits) {
            for j in 0..self.post.dim {
                out[j] += bin_concrete_log_density(s[j], logits[j], self.tau_p);
            }
        }
    }
}

/// Estimate the decomposition on `data` (`[N, D]`). All randomness comes
/// from `rng`.
pub fn estimate_decomposition<T: Real, R: Rng>(
    model: &Model<T>,
    data: &Tensor<T>,
    opts: &DecompositionOptions,
    rng: &mut R,
) -> Result<TcDecomposition> {
    if opts.estimator_batch < 2 {
        return Err(Error::InvalidParameter(format!(
            "estimator_batch must be >= 2, got {}",
            opts.estimator_batch
        )));
    }
    if opts.samples_per_point == 0 || opts.eval_points == Some(0) {
        return Err(Error::InvalidParameter(
            "samples_per_point and eval_points must be >= 1".into(),
        ));
    }
    let post = model.posterior(data)?;
    let (n, k, d) = (post.rows, post.dim, data.cols());
    if n == 0 {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let cfg = model.config();
    let dens = Densities {
        post: &post,
        tau_q: cfg.posterior_temperature,
        tau_p: cfg.prior_temperature,
    };
    let m_eff = opts.estimator_batch.min(n);
    let eval: Vec<usize> = match opts.eval_points {
        Some(p) if p < n => {
            let mut idx = sample_indices(rng, n, p).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let samples = opts.samples_per_point;

    // Weights of the stratified estimator: the own term gets 1/N, each of
    // the M − 1 others (N − 1) / (N (M − 1)).
    let w_self = -(n as f64).ln();
    let w_other = if m_eff > 1 {
        ((n - 1) as f64).ln() - (n as f64).ln() - ((m_eff - 1) as f64).ln()
    } else {
        f64::NEG_INFINITY
    };

    let (mut mi, mut tc, mut dkl) = (0.0, 0.0, 0.0);
    let mut codes = Vec::with_capacity(eval.len() * samples * k);
    let mut code_rows = Vec::with_capacity(eval.len() * samples);
    let mut row = vec![0.0; k];
    let mut joint_terms = Vec::with_capacity(m_eff);
    let mut dim_terms = vec![Vec::with_capacity(m_eff); k];
    let mut prior = vec![0.0; k];
    for &i in &eval {
        for _ in 0..samples {
            let mean = &post.mean[i * k..(i + 1) * k];
            let lv = &post.log_var[i * k..(i + 1) * k];
            let a: Vec<f64> = (0..k)
                .map(|j| {
                    let e: f64 = rng.sample(StandardNormal);
                    mean[j] + (0.5 * lv[j]).exp() * e
                })
                .collect();
            let s: Option<Vec<f64>> = post.mask_logits.as_ref().map(|logits| {
                (0..k)
                    .map(|j| {
                        let u = loop {
                            let u: f64 = rng.random();
                            if u > 0.0 {
                                break u;
                            }
                        };
                        (logits[i * k + j] + logistic_from_uniform(u)) / cfg.posterior_temperature
                    })
                    .collect()
            });
            let others: Vec<usize> = if m_eff == n {
                (0..n).filter(|&m| m != i).collect()
            } else {
                sample_indices(rng, n - 1, m_eff - 1)
                    .into_iter()
                    .map(|m| if m >= i { m + 1 } else { m })
                    .collect()
            };

            joint_terms.clear();
            dim_terms.iter_mut().for_each(|v| v.clear());
            dens.conditional(i, s.as_deref(), &a, &mut row);
            let log_q_cond: f64 = row.iter().sum();
            joint_terms.push(w_self + log_q_cond);
            for j in 0..k {
                dim_terms[j].push(w_self + row[j]);
            }
            for &m in &others {
                dens.conditional(m, s.as_deref(), &a, &mut row);
                joint_terms.push(w_other + row.iter().sum::<f64>());
                for j in 0..k {
                    dim_terms[j].push(w_other + row[j]);
                }
            }
            let log_q = log_sum_exp(&joint_terms);
            let log_q_dims: f64 = dim_terms.iter().map(|t| log_sum_exp(t)).sum();
            dens.prior(s.as_deref(), &a, &mut prior);
            let log_p: f64 = prior.iter().sum();

            mi += log_q_cond - log_q;
            tc += log_q - log_q_dims;
            dkl += log_q_dims - log_p;

            match &s {
                Some(s) => codes.extend(
                    s.iter()
                        .zip(&a)
                        .map(|(&s, &a)| crate::autodiff::sigmoid(s) * a),
                ),
                None => codes.extend_from_slice(&a),
            }
            code_rows.push(i);
        }
    }
    let task: Option<Vec<f64>> = post.task_logits.as_ref().map(|t| {
        let c = t.len() / n;
        code_rows
            .iter()
            .flat_map(|&i| t[i * c..(i + 1) * c].iter().copied())
            .collect()
    });
    let logits = model.decode_logits(&codes, task.as_deref())?;
    let mut distortion = 0.0;
    for (r, &i) in code_rows.iter().enumerate() {
        let x: Vec<f64> = data.row(i).iter().map(|v| v.as_f64()).collect();
        distortion -= bernoulli_loglik(&x, &logits[r * d..(r + 1) * d]);
    }

    let total = code_rows.len() as f64;
    Ok(TcDecomposition {
        distortion: distortion / total,
        total_correlation: tc / total,
        dimwise_kl: dkl / total,
        index_code_mi: mi / total,
        n_data: n,
        estimator_batch: m_eff,
        samples: code_rows.len(),
    })
}

/// One (TC, D) coordinate of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcdPoint {
    pub model_kind: ModelKind,
    pub beta: f64,
    pub seed: u64,
    pub total_correlation: f64,
    pub distortion: f64,
    pub dimwise_kl: f64,
    pub index_code_mi: f64,
}

/// Decompose with a generator seeded from `seed`.
pub fn tcd_point<T: Real>(
    model: &Model<T>,
    data: &Tensor<T>,
    opts: &DecompositionOptions,
    seed: u64,
) -> Result<TcdPoint> {
    let mut rng = crate::training::train_rng(seed);
    let dec = estimate_decomposition(model, data, opts, &mut rng)?;
    Ok(TcdPoint {
        model_kind: model.kind(),
        beta: model.config().beta,
        seed: model.config().seed,
        total_correlation: dec.total_correlation,
        distortion: dec.distortion,
        dimwise_kl: dec.dimwise_kl,
        index_code_mi: dec.index_code_mi,
    })
}

pub const TCD_CSV_HEADER: &str =
    "model_kind,beta,seed,total_correlation,distortion,dimwise_kl,index_code_mi";

/// Write points as CSV rows under [`TCD_CSV_HEADER`].
pub fn write_tcd_csv<W: Write>(mut w: W, points: &[TcdPoint]) -> Result<()> {
    writeln!(w, "{TCD_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.model_kind.as_str(),
            p.beta,
            p.seed,
            p.total_correlation,
            p.distortion,
            p.dimwise_kl,
            p.index_code_mi
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Tensor<f64> {
        Tensor::new(
            &[n, 4],
            (0..n * 4)
                .map(|i| ((i * 5) % 3 == 0) as u8 as f64)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_datapoint_has_no_index_code_information() {
        for kind in [ModelKind::Gaussian, ModelKind::Ibp] {
            let model = Model::<f64>::new(ModelConfig::mlp(kind, 4, 3, vec![5])).unwrap();
            let opts = DecompositionOptions {
                estimator_batch: 2,
                samples_per_point: 50,
                eval_points: None,
            };
            let dec =
                estimate_decomposition(&model, &data(1), &opts, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap();
            assert_eq!(dec.index_code_mi, 0.0);
            assert!(dec.total_correlation.abs() < 1e-12);
            assert_eq!(dec.estimator_batch, 1);
        }
    }

    #[test]
    fn small_batches_are_rejected() {
        let model = Model::<f64>::new(ModelConfig::mlp(ModelKind::Gaussian, 4, 2, vec![])).unwrap();
        let opts = DecompositionOptions {
            estimator_batch: 1,
            ..Default::default()
        };
        assert!(
            estimate_decomposition(&model, &data(5), &opts, &mut ChaCha8Rng::seed_from_u64(0))
                .is_err()
        );
    }

    #[test]
    fn tcd_points_repeat_and_serialize() {
        let model = Model::<f64>::new(ModelConfig::mlp(ModelKind::Ibp, 4, 3, vec![5])).unwrap();
        let opts = DecompositionOptions {
            estimator_batch: 4,
            samples_per_point: 2,
            eval_points: Some(5),
        };
        let a = tcd_point(&model, &data(12), &opts, 3).unwrap();
        let b = tcd_point(&model, &data(12), &opts, 3).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_tcd_csv(&mut buf, &[a]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(TCD_CSV_HEADER));
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 7);
    }
}

//! Truncated stick-breaking construction of the Beta-Bernoulli (IBP) prior.
//!
//! Activation probabilities are running products of sticks,
//! `π_k = ν_1 · … · ν_k`, computed as a cumulative sum in log space.

use serde::{Deserialize, Serialize};

use crate::distributions::{
    bin_concrete_pre_sigmoid, kumaraswamy_log_inverse_cdf, logit_clamped, BinConcreteParams,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbpPriorConfig {
    /// Concentration; the expected number of active features.
    pub alpha: f64,
    /// Hard truncation of the infinite process.
    pub truncation: usize,
    /// Temperature of the relaxed Bernoulli prior.
    pub temperature: f64,
}

impl IbpPriorConfig {
    pub fn new(alpha: f64, truncation: usize, temperature: f64) -> Result<Self> {
        let c = Self {
            alpha,
            truncation,
            temperature,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.truncation == 0 {
            return Err(Error::InvalidParameter("truncation must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter(
                "temperature must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `E[π_k] = (α / (α + 1))^k` for `k = 1..=K`.
    pub fn expected_activation(&self) -> Vec<f64> {
        let r = self.alpha / (self.alpha + 1.0);
        (1..=self.truncation).map(|k| r.powi(k as i32)).collect()
    }
}

/// `ln π = cumsum(ln ν)`. Entries of `log_nu` must be `<= 0`.
pub fn stick_breaking_log_pi(log_nu: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = log_nu.iter().find(|&&v| !(v <= 0.0)) {
        return Err(Error::Precondition(format!(
            "log stick values must be <= 0, got {bad}"
        )));
    }
    Ok(log_nu
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect())
}

/// Noise for one prior draw of an `n × K` mask: one uniform per stick
/// (shared by all rows) and one logistic variate per entry.
#[derive(Clone, Debug)]
pub struct PriorMaskNoise {
    pub stick_uniform: Vec<f64>,
    pub logistic: Vec<f64>,
}

/// Draw a relaxed `n × K` mask from the prior: `ν ~ Beta(α, 1)` (exactly, as
/// `Kumaraswamy(α, 1)`), compose `π`, then sample the relaxed Bernoulli at
/// the prior temperature. Returns the row-major relaxed mask.
pub fn sample_prior_mask(config: &IbpPriorConfig, noise: &PriorMaskNoise) -> Result<Vec<f64>> {
    config.validate()?;
    let k = config.truncation;
    if noise.stick_uniform.len() != k
        || noise.logistic.is_empty()
        || !noise.logistic.len().is_multiple_of(k)
    {
        return Err(Error::ShapeMismatch(format!(
            "prior noise ({} sticks, {} logistic) does not match truncation {k}",
            noise.stick_uniform.len(),
            noise.logistic.len()
        )));
    }
    if noise.stick_uniform.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::Precondition("stick noise must lie in (0, 1)".into()));
    }
    let log_nu: Vec<f64> = noise
        .stick_uniform
        .iter()
        .map(|&u| kumaraswamy_log_inverse_cdf(config.alpha, 1.0, u))
        .collect();
    let log_pi = stick_breaking_log_pi(&log_nu)?;
    let logits: Vec<f64> = log_pi.iter().map(|lp| logit_clamped(lp.exp())).collect();
    let params = BinConcreteParams::new(logits, config.temperature)?;
    let mut out = Vec::with_capacity(noise.logistic.len());
    for row in noise.logistic.chunks(k) {
        out.extend(
            bin_concrete_pre_sigmoid(&params, row)?
                .into_iter()
                .map(crate::autodiff::sigmoid),
        );
    }
    Ok(out)
}

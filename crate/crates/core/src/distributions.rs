//! Reparameterizable samplers, densities and KL terms for the three families
//! the model composes: diagonal Gaussian loadings, Kumaraswamy sticks (a
//! relaxation of Beta) and binary Concrete masks (a relaxation of Bernoulli).
//!
//! Every sampler is a pure function of `(params, noise)`. The plain `f64`
//! functions are the reference surface; the `*_var` functions build the same
//! expressions on an autodiff [`Graph`] so gradients reach the parameters.
//!
//! The binary Concrete uses logistic noise on the logit scale,
//! `sigmoid((logit(π) + L) / τ)` with `L = ln u − ln(1 − u)`, so that its
//! zero-temperature limit is exactly `Bernoulli(π)`. Densities are evaluated
//! on the pre-sigmoid value, where the variable is logistic with location
//! `logit / τ` and scale `1 / τ`.

use crate::autodiff::{log1mexp, sigmoid, softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::special::{digamma, ln_beta, trigamma, EULER_GAMMA};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logit/log.
pub const PROB_EPS: f64 = 1e-6;
/// Log-variances emitted by encoders are clamped into this range.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);
/// Number of series terms kept in the Kumaraswamy–Beta KL.
pub const KUMARASWAMY_SERIES_TERMS: usize = 11;

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{name} contains non-finite entries"
        )))
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{name} has length {got}, expected {want}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianParams {
    mean: Vec<f64>,
    log_variance: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        check_len("log_variance", log_variance.len(), mean.len())?;
        check_finite("mean", &mean)?;
        check_finite("log_variance", &log_variance)?;
        Ok(Self { mean, log_variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_variance(&self) -> &[f64] {
        &self.log_variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of a point under the diagonal Gaussian, per dimension.
    pub fn log_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.dim())?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_variance)
            .map(|((&x, &m), &lv)| gaussian_log_density(x, m, lv))
            .collect())
    }
}

/// `ln N(x; mean, exp(log_var))`.
#[inline]
pub fn gaussian_log_density(x: f64, mean: f64, log_var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + d * d * (-log_var).exp())
}

/// Closed form `KL(N(μ, diag σ²) || N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_diag_gaussian_to_std_normal(q: &DiagGaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_variance)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// `mean + exp(½ log_variance) · eps`.
pub fn reparam_gaussian(q: &DiagGaussianParams, eps: &[f64]) -> Result<Vec<f64>> {
    check_len("eps", eps.len(), q.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.log_variance)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Global stick parameters, stored as logs so any real value is valid.
#[derive(Clone, Debug, PartialEq)]
pub struct KumaraswamyParams {
    log_a: Vec<f64>,
    log_b: Vec<f64>,
}

impl KumaraswamyParams {
    pub fn new(log_a: Vec<f64>, log_b: Vec<f64>) -> Result<Self> {
        check_len("log_b", log_b.len(), log_a.len())?;
        check_finite("log_a", &log_a)?;
        check_finite("log_b", &log_b)?;
        if log_a.is_empty() {
            return Err(Error::InvalidParameter(
                "Kumaraswamy truncation must be >= 1".into(),
            ));
        }
        Ok(Self { log_a, log_b })
    }

    /// Build from positive shape parameters.
    pub fn from_shapes(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.iter().chain(b).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(
                "Kumaraswamy shapes must be positive".into(),
            ));
        }
        Self::new(
            a.iter().map(|v| v.ln()).collect(),
            b.iter().map(|v| v.ln()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.log_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_a.is_empty()
    }

    pub fn log_a(&self) -> &[f64] {
        &self.log_a
    }

    pub fn log_b(&self) -> &[f64] {
        &self.log_b
    }

    pub fn a(&self, k: usize) -> f64 {
        self.log_a[k].exp()
    }

    pub fn b(&self, k: usize) -> f64 {
        self.log_b[k].exp()
    }

    /// Per-stick means `b · B(1 + 1/a, b)`.
    pub fn means(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| kumaraswamy_mean(self.a(k), self.b(k)))
            .collect()
    }
}

pub fn kumaraswamy_mean(a: f64, b: f64) -> f64 {
    (b.ln() + ln_beta(1.0 + 1.0 / a, b)).exp()
}

/// `ln ν` for `ν = (1 − u^{1/b})^{1/a}`, evaluated in log space.
///
/// `u^{1/b}` is kept strictly below one so `ln ν` stays finite.
#[inline]
pub fn kumaraswamy_log_inverse_cdf(a: f64, b: f64, u: f64) -> f64 {
    let t = (u.ln() / b).min(-1e-12);
    log1mexp(t) / a
}

/// Draw sticks `ν_k = (1 − u_k^{1/b_k})^{1/a_k}`.
pub fn sample_kumaraswamy(params: &KumaraswamyParams, u: &[f64]) -> Result<Vec<f64>> {
    check_len("u", u.len(), params.len())?;
    if let Some(bad) = u.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Precondition(format!(
            "uniform noise must lie in (0, 1), got {bad}"
        )));
    }
    Ok((0..params.len())
        .map(|k| kumaraswamy_log_inverse_cdf(params.a(k), params.b(k), u[k]).exp())
        .collect())
}

/// `KL(Kumaraswamy(a, b) || Beta(α, β))` for one stick with the infinite
/// series truncated at [`KUMARASWAMY_SERIES_TERMS`] terms. The series is
/// multiplied by `β − 1` and vanishes for the `Beta(α, 1)` prior.
pub fn kl_kumaraswamy_to_beta_general(a: f64, b: f64, alpha: f64, beta: f64) -> f64 {
    let mut series = 0.0;
    if beta != 1.0 {
        for m in 1..=KUMARASWAMY_SERIES_TERMS {
            let m = m as f64;
            series += (ln_beta(m / a, b)).exp() / (m + a * b);
        }
        series *= (beta - 1.0) * b;
    }
    (a - alpha) / a * (-EULER_GAMMA - digamma(b) - 1.0 / b) + (a * b).ln() + ln_beta(alpha, beta)
        - (b - 1.0) / b
        + series
}

/// Value and partial derivatives `(kl, ∂kl/∂a, ∂kl/∂b)` of the per-stick KL
/// against `Beta(α, 1)`.
pub fn kl_kumaraswamy_beta1_with_grad(a: f64, b: f64, alpha: f64) -> (f64, f64, f64) {
    let c = -EULER_GAMMA - digamma(b) - 1.0 / b;
    let kl = (a - alpha) / a * c + (a * b).ln() - alpha.ln() - (b - 1.0) / b;
    let d_a = alpha / (a * a) * c + 1.0 / a;
    let d_b = (1.0 - alpha / a) * (-trigamma(b) + 1.0 / (b * b)) + 1.0 / b - 1.0 / (b * b);
    (kl, d_a, d_b)
}

/// Summed stick KL `Σ_k KL(q(ν_k | a_k, b_k) || Beta(α, 1))`.
pub fn kl_kumaraswamy_to_beta(q: &KumaraswamyParams, prior_alpha: f64) -> Result<f64> {
    if !(prior_alpha > 0.0 && prior_alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "prior alpha must be positive, got {prior_alpha}"
        )));
    }
    Ok((0..q.len())
        .map(|k| kl_kumaraswamy_beta1_with_grad(q.a(k), q.b(k), prior_alpha).0)
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinConcreteParams {
    logits: Vec<f64>,
    temperature: f64,
}

impl BinConcreteParams {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        check_finite("logits", &logits)?;
        Ok(Self {
            logits,
            temperature,
        })
    }

    /// Logits from activation probabilities, clamped into `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn from_probs(probs: &[f64], temperature: f64) -> Result<Self> {
        Self::new(
            probs.iter().map(|&p| logit_clamped(p)).collect(),
            temperature,
        )
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

pub fn logit_clamped(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p.ln() - (-p).ln_1p()
}

/// Standard logistic noise from a uniform draw in `(0, 1)`.
#[inline]
pub fn logistic_from_uniform(u: f64) -> f64 {
    u.ln() - (-u).ln_1p()
}

/// Pre-sigmoid relaxed sample `(logit + L) / τ`.
pub fn bin_concrete_pre_sigmoid(params: &BinConcreteParams, noise: &[f64]) -> Result<Vec<f64>> {
    check_len("noise", noise.len(), params.len())?;
    Ok(params
        .logits
        .iter()
        .zip(noise)
        .map(|(&l, &n)| (l + n) / params.temperature)
        .collect())
}

/// Relaxed Bernoulli sample `sigmoid((logit + L) / τ)`, kept strictly inside (0, 1).
pub fn sample_bin_concrete(params: &BinConcreteParams, noise: &[f64]) -> Result<Vec<f64>> {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    Ok(bin_concrete_pre_sigmoid(params, noise)?
        .into_iter()
        .map(|x| sigmoid(x).clamp(f64::MIN_POSITIVE, HI))
        .collect())
}

/// Log-density of the pre-sigmoid variable:
/// `ln τ + l − τx − 2·softplus(l − τx)`.
#[inline]
pub fn bin_concrete_log_density(x_logit: f64, logit: f64, temperature: f64) -> f64 {
    let t = logit - temperature * x_logit;
    temperature.ln() + t - 2.0 * softplus(t)
}

pub fn log_density_bin_concrete(x_logit: &[f64], params: &BinConcreteParams) -> Result<Vec<f64>> {
    check_len("x_logit", x_logit.len(), params.len())?;
    check_finite("x_logit", x_logit)?;
    Ok(x_logit
        .iter()
        .zip(&params.logits)
        .map(|(&x, &l)| bin_concrete_log_density(x, l, params.temperature))
        .collect())
}

/// Monte Carlo `KL(q || p)` for factorized binary Concretes: the average over
/// samples of `Σ_k ln q(s_k) − ln p(s_k)`. `q_samples` holds `S × K`
/// pre-sigmoid samples drawn from `q`, row-major.
pub fn kl_bin_concrete_mc(
    q: &BinConcreteParams,
    p: &BinConcreteParams,
    q_samples: &[f64],
) -> Result<f64> {
    let k = q.len();
    check_len("prior logits", p.len(), k)?;
    if k == 0 || q_samples.is_empty() || !q_samples.len().is_multiple_of(k) {
        return Err(Error::ShapeMismatch(format!(
            "{} samples do not tile dimension {k}",
            q_samples.len()
        )));
    }
    check_finite("q_samples", q_samples)?;
    let rows = q_samples.len() / k;
    let total: f64 = q_samples
        .chunks(k)
        .map(|s| {
            s.iter()
                .enumerate()
                .map(|(j, &x)| {
                    bin_concrete_log_density(x, q.logits[j], q.temperature)
                        - bin_concrete_log_density(x, p.logits[j], p.temperature)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

// ----------------------------------------------------------------------------
// Differentiable versions
// ----------------------------------------------------------------------------

/// `ln ν` of Kumaraswamy sticks, differentiable in `log_a`, `log_b`.
/// `u` is a constant tensor of uniforms in (0, 1).
pub fn kumaraswamy_log_sample_var<T: Real>(
    g: &mut Graph<T>,
    log_a: Var,
    log_b: Var,
    u: &Tensor<T>,
) -> Result<Var> {
    let ln_u = g.constant(Tensor::new(
        u.shape(),
        u.data().iter().map(|v| v.ln()).collect(),
    )?);
    let neg_log_b = g.neg(log_b);
    let inv_b = g.exp(neg_log_b);
    let t = g.mul(ln_u, inv_b)?;
    let t = g.clamp(t, T::lit(f64::MIN), T::lit(-1e-12));
    let w = g.log1mexp(t);
    let neg_log_a = g.neg(log_a);
    let inv_a = g.exp(neg_log_a);
    g.mul(w, inv_a)
}

/// Per-stick `KL(Kumaraswamy(a, b) || Beta(α, 1))` as a graph node.
pub fn kl_kumaraswamy_beta1_var<T: Real>(
    g: &mut Graph<T>,
    log_a: Var,
    log_b: Var,
    alpha: f64,
) -> Result<Var> {
    g.map2(log_a, log_b, |la, lb| {
        let (a, b) = (la.as_f64().exp(), lb.as_f64().exp());
        let (kl, da, db) = kl_kumaraswamy_beta1_with_grad(a, b, alpha);
        (T::lit(kl), T::lit(da * a), T::lit(db * b))
    })
}

/// Clamped `logit(π)` from `ln π`.
pub fn logit_from_log_prob_var<T: Real>(g: &mut Graph<T>, log_p: Var) -> Result<Var> {
    let lp = g.clamp(log_p, T::lit(PROB_EPS.ln()), T::lit((-PROB_EPS).ln_1p()));
    let l1m = g.log1mexp(lp);
    g.sub(lp, l1m)
}

/// Pre-sigmoid Concrete sample `(logits + noise) / τ`.
pub fn bin_concrete_pre_sigmoid_var<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    noise: Var,
    temperature: f64,
) -> Result<Var> {
    let shifted = g.add(logits, noise)?;
    Ok(g.scale(shifted, T::lit(1.0 / temperature)))
}

/// Elementwise Concrete log-density of pre-sigmoid `x` at `logits` and `τ`.
pub fn bin_concrete_log_density_var<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    logits: Var,
    temperature: f64,
) -> Result<Var> {
    let tx = g.scale(x, T::lit(temperature));
    let t = g.sub(logits, tx)?;
    let sp = g.softplus(t);
    let sp2 = g.scale(sp, T::lit(2.0));
    let diff = g.sub(t, sp2)?;
    Ok(g.add_scalar(diff, T::lit(temperature.ln())))
}

/// `mean + exp(½ log_var) · eps`.
pub fn reparam_gaussian_var<T: Real>(
    g: &mut Graph<T>,
    mean: Var,
    log_var: Var,
    eps: Var,
) -> Result<Var> {
    let half = g.scale(log_var, T::lit(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mean, noise)
}

/// Elementwise `½ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_gaussian_std_normal_var<T: Real>(
    g: &mut Graph<T>,
    mean: Var,
    log_var: Var,
) -> Result<Var> {
    let m2 = g.square(mean);
    let var = g.exp(log_var);
    let s = g.add(m2, var)?;
    let s = g.sub(s, log_var)?;
    let s = g.add_scalar(s, -T::one());
    Ok(g.scale(s, T::lit(0.5)))
}

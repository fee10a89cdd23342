//! The three trainable models: IBP-VAE, its supervised variant cIBP-VAE, and
//! the Gaussian β-VAE baseline.
//!
//! The IBP code is `y = z ⊙ a`: a relaxed binary mask `z` whose prior is a
//! truncated stick-breaking IBP, times Gaussian loadings `a`. The stick
//! posterior `q(ν) = Kumaraswamy(a, b)` has global parameters shared by all
//! datapoints and is sampled once per minibatch. Posterior mask logits are
//! `logit(π) + d(x)`, prior mask logits are `logit(π)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Graph, Var};
use crate::distributions::{
    bin_concrete_log_density_var, bin_concrete_pre_sigmoid_var, kl_gaussian_std_normal_var,
    kl_kumaraswamy_beta1_var, kumaraswamy_log_sample_var, kumaraswamy_mean, logistic_from_uniform,
    logit_clamped, logit_from_log_prob_var, reparam_gaussian_var, LOG_VAR_RANGE,
};
use crate::error::{Error, Result};
use crate::networks::{ArchitectureKind, ArchitecturePlan, Encoder, Network};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Rows per chunk when running evaluation passes over large inputs.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ibp,
    Gaussian,
    CIbp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ibp => "ibp",
            ModelKind::Gaussian => "gaussian",
            ModelKind::CIbp => "c_ibp",
        }
    }

    pub fn has_mask(self) -> bool {
        self != ModelKind::Gaussian
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Truncation `K` for IBP models, latent size for the Gaussian model.
    pub latent_dim: usize,
    pub input_dim: usize,
    pub architecture: ArchitectureKind,
    /// Hidden widths, used by the generic MLP architecture only.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub prior_temperature: f64,
    pub posterior_temperature: f64,
    /// Weight of the supervised cross-entropy (c_ibp only).
    #[serde(default)]
    pub zeta: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub num_classes: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl ModelConfig {
    /// MLP model for flattened 3×28×28 colored MNIST: `K = 100`, `α = 30`,
    /// learning rate `1e-4`.
    pub fn colored_mnist(kind: ModelKind) -> Self {
        Self {
            kind,
            latent_dim: 100,
            input_dim: 3 * 28 * 28,
            architecture: ArchitectureKind::MnistMlp,
            hidden: Vec::new(),
            alpha: 30.0,
            beta: 1.0,
            prior_temperature: 0.5,
            posterior_temperature: 0.5,
            zeta: if kind == ModelKind::CIbp { 5.0 } else { 0.0 },
            warmup_epochs: if kind == ModelKind::CIbp { 100 } else { 0 },
            num_classes: if kind == ModelKind::CIbp { 10 } else { 0 },
            seed: 0,
            learning_rate: 1e-4,
            epochs: 300,
            batch_size: 100,
        }
    }

    /// Convolutional model for 64×64 dSprites: `K = 10`, `α = 10`, learning
    /// rate `5e-4`.
    pub fn dsprites(kind: ModelKind) -> Self {
        Self {
            kind,
            latent_dim: 10,
            input_dim: 64 * 64,
            architecture: ArchitectureKind::DspritesCnn,
            hidden: Vec::new(),
            alpha: 10.0,
            beta: 1.0,
            prior_temperature: 0.5,
            posterior_temperature: 0.5,
            zeta: 0.0,
            warmup_epochs: 0,
            num_classes: 0,
            seed: 0,
            learning_rate: 5e-4,
            epochs: 30,
            batch_size: 64,
        }
    }

    /// Small MLP model for toy data.
    pub fn mlp(kind: ModelKind, input_dim: usize, latent_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            kind,
            latent_dim,
            input_dim,
            architecture: ArchitectureKind::Mlp,
            hidden,
            alpha: 5.0,
            beta: 1.0,
            prior_temperature: 0.5,
            posterior_temperature: 0.5,
            zeta: 0.0,
            warmup_epochs: 0,
            num_classes: 0,
            seed: 0,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim == 0 || self.input_dim == 0 {
            return bad("latent_dim and input_dim must be >= 1".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.kind.has_mask() {
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return bad(format!("alpha must be positive, got {}", self.alpha));
            }
            for (name, t) in [
                ("prior_temperature", self.prior_temperature),
                ("posterior_temperature", self.posterior_temperature),
            ] {
                if !(t > 0.0 && t.is_finite()) {
                    return bad(format!("{name} must be positive, got {t}"));
                }
            }
        }
        if self.kind == ModelKind::CIbp {
            if self.num_classes < 2 {
                return bad("c_ibp needs num_classes >= 2".into());
            }
            if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
                return bad(format!("zeta must be nonnegative, got {}", self.zeta));
            }
        } else if self.zeta != 0.0 || self.warmup_epochs != 0 || self.num_classes != 0 {
            return bad(format!(
                "zeta, warmup_epochs and num_classes only apply to c_ibp, not {}",
                self.kind.as_str()
            ));
        }
        Ok(())
    }

    /// Supervised weight after `epoch` completed epochs: a linear ramp from
    /// 0 to `ζ` over `warmup_epochs`.
    pub fn zeta_effective(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            self.zeta
        } else {
            self.zeta * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    fn decoder_input(&self) -> usize {
        self.latent_dim
            + if self.kind == ModelKind::CIbp {
                self.num_classes
            } else {
                0
            }
    }
}

/// Per-datapoint ELBO terms of one batch. The stick KL is global and is
/// divided by the dataset size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub reconstruction_loglik: f64,
    pub kl_nu: f64,
    pub kl_z: f64,
    pub kl_a: f64,
    pub beta: f64,
    pub total_objective: f64,
}

impl ElboReport {
    pub fn new(reconstruction_loglik: f64, kl_nu: f64, kl_z: f64, kl_a: f64, beta: f64) -> Self {
        Self {
            reconstruction_loglik,
            kl_nu,
            kl_z,
            kl_a,
            beta,
            total_objective: reconstruction_loglik - beta * (kl_nu + kl_z + kl_a),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.reconstruction_loglik,
            self.kl_nu,
            self.kl_z,
            self.kl_a,
            self.total_objective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Latent codes of a batch, row-major `[rows, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub rows: usize,
    pub dim: usize,
    /// Mask: relaxed in (0, 1) from a training pass, hard {0, 1} from
    /// [`Model::eval_encode`]. All ones for the Gaussian model.
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    /// Pre-sigmoid mask values (empty for the Gaussian model).
    pub z_pre_sigmoid: Vec<f64>,
    /// Deterministic task representation (c_ibp only).
    pub task_logits: Option<Vec<f64>>,
}

impl LatentCode {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.y[r * self.dim..(r + 1) * self.dim]
    }
}

/// Reparameterization noise for one training pass over `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardNoise {
    /// `K` uniforms in (0, 1) for the sticks.
    pub stick_uniform: Option<Vec<f64>>,
    /// `n × K` standard logistic variates for the mask.
    pub logistic: Option<Vec<f64>>,
    /// `n × K` standard normal variates for the loadings.
    pub gaussian: Vec<f64>,
}

fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

impl ForwardNoise {
    pub fn sample<R: Rng>(config: &ModelConfig, n: usize, rng: &mut R) -> Self {
        let k = config.latent_dim;
        let (stick_uniform, logistic) = if config.kind.has_mask() {
            let u = (0..k).map(|_| open_uniform(rng)).collect();
            let l = (0..n * k)
                .map(|_| logistic_from_uniform(open_uniform(rng)))
                .collect();
            (Some(u), Some(l))
        } else {
            (None, None)
        };
        let gaussian = (0..n * k).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            stick_uniform,
            logistic,
            gaussian,
        }
    }

    /// Noise with every variate at its median: `u = ½`, `L = 0`, `ε = 0`.
    pub fn median(config: &ModelConfig, n: usize) -> Self {
        let k = config.latent_dim;
        let masked = config.kind.has_mask();
        Self {
            stick_uniform: masked.then(|| vec![0.5; k]),
            logistic: masked.then(|| vec![0.0; n * k]),
            gaussian: vec![0.0; n * k],
        }
    }
}

/// Options of a training pass that are not model parameters.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// Dataset size used to scale the global stick KL.
    pub n_dataset: usize,
    pub zeta_effective: f64,
    pub labels: Option<&'a [usize]>,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(n_dataset: usize) -> Self {
        Self {
            n_dataset,
            zeta_effective: 0.0,
            labels: None,
        }
    }
}

/// Graph handles and values of one training pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub report: ElboReport,
    /// Scalar loss `−total + ζ_eff · CE` to minimize.
    pub loss: Var,
    pub loss_value: f64,
    /// Mean cross-entropy of the task head (c_ibp only).
    pub cross_entropy: Option<f64>,
    /// Number of correct task predictions in the batch (c_ibp with labels).
    pub correct: Option<usize>,
    pub z_pre_sigmoid: Option<Var>,
    pub z: Option<Var>,
    pub a: Var,
    pub y: Var,
    pub task_logits: Option<Var>,
    pub reconstruction_logits: Var,
}

/// Posterior parameters of a batch with sticks at their posterior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub rows: usize,
    pub dim: usize,
    /// Mask logits `logit(π̄) + d(x)`, `[rows, dim]` (masked models).
    pub mask_logits: Option<Vec<f64>>,
    /// Prior mask logits `logit(π̄)`, `[dim]` (masked models).
    pub prior_logits: Option<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Clamped log-variances.
    pub log_var: Vec<f64>,
    pub task_logits: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Sticks {
    log_a: ParamId,
    log_b: ParamId,
}

/// Model parameters together with the network structure that consumes them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Network,
    sticks: Option<Sticks>,
}

impl<T: Real> Model<T> {
    /// Build and initialize from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = crate::training::init_rng(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = ArchitecturePlan::new(
            &config.architecture,
            config.input_dim,
            &config.hidden,
            config.decoder_input(),
        )?;
        let mut store = ParamStore::new();
        let classes = (config.kind == ModelKind::CIbp).then_some(config.num_classes);
        let encoder = Encoder::build(
            &plan,
            config.latent_dim,
            config.kind.has_mask(),
            classes,
            &mut store,
            rng,
        )?;
        let decoder = Network::build(&plan.decoder, "decoder", &mut store, rng)?;
        let sticks = if config.kind.has_mask() {
            // q(ν) starts at the prior Beta(α, 1) = Kumaraswamy(α, 1).
            let k = config.latent_dim;
            let log_a = store.add(
                "sticks.log_a",
                Tensor::full(&[k], T::lit(config.alpha.ln())),
            )?;
            let log_b = store.add("sticks.log_b", Tensor::zeros(&[k]))?;
            Some(Sticks { log_a, log_b })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            sticks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Change the training length, e.g. to continue a finished run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Kumaraswamy shapes `(a, b)` of the stick posterior (masked models).
    pub fn stick_shapes(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.sticks.map(|s| {
            let exp = |id| {
                self.store
                    .get(id)
                    .data()
                    .iter()
                    .map(|v| v.as_f64().exp())
                    .collect()
            };
            (exp(s.log_a), exp(s.log_b))
        })
    }

    /// `π̄_k = ∏_{i ≤ k} E[ν_i]` under the stick posterior.
    pub fn posterior_mean_pi(&self) -> Option<Vec<f64>> {
        let (a, b) = self.stick_shapes()?;
        let mut acc = 0.0;
        Some(
            a.iter()
                .zip(&b)
                .map(|(&a, &b)| {
                    acc += kumaraswamy_mean(a, b).ln();
                    acc.exp()
                })
                .collect(),
        )
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        if x.cols() != self.config.input_dim || x.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match input_dim {}",
                x.shape(),
                self.config.input_dim
            )));
        }
        Ok(x.rows())
    }

    /// Build the training objective on `g`. `params` must come from
    /// binding this model's store on the same graph.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        x: &Tensor<T>,
        noise: &ForwardNoise,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardPass> {
        let n = self.check_input(x)?;
        let k = self.config.latent_dim;
        if n == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        if opts.n_dataset == 0 {
            return Err(Error::Precondition("n_dataset must be >= 1".into()));
        }
        if noise.gaussian.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "{} gaussian variates for {n} x {k} latents",
                noise.gaussian.len()
            )));
        }
        let xv = g.constant(x.clone());
        let enc = self.encoder.forward(g, params, xv)?;
        let (lo, hi) = LOG_VAR_RANGE;
        let log_var = g.clamp(enc.log_var, T::lit(lo), T::lit(hi));
        let eps = g.constant(Tensor::from_f64(&[n, k], &noise.gaussian)?);
        let a = reparam_gaussian_var(g, enc.mean, log_var, eps)?;
        let kl_a_el = kl_gaussian_std_normal_var(g, enc.mean, log_var)?;
        let kl_a = g.sum(kl_a_el);

        let (y, z, s, kl_z, kl_nu) = match (self.sticks, enc.mask_logits) {
            (Some(st), Some(d)) => {
                let (u, l) = match (&noise.stick_uniform, &noise.logistic) {
                    (Some(u), Some(l)) if u.len() == k && l.len() == n * k => (u, l),
                    _ => {
                        return Err(Error::ShapeMismatch(
                            "mask noise missing or mis-sized".into(),
                        ))
                    }
                };
                let (la, lb) = (params.var(st.log_a), params.var(st.log_b));
                let log_nu = kumaraswamy_log_sample_var(g, la, lb, &Tensor::from_f64(&[k], u)?)?;
                let log_pi = g.cumsum_last(log_nu);
                let prior_logits = logit_from_log_prob_var(g, log_pi)?;
                let post_logits = g.add(d, prior_logits)?;
                let lv = g.constant(Tensor::from_f64(&[n, k], l)?);
                let tq = self.config.posterior_temperature;
                let s = bin_concrete_pre_sigmoid_var(g, post_logits, lv, tq)?;
                let z = g.sigmoid(s);
                let log_q = bin_concrete_log_density_var(g, s, post_logits, tq)?;
                let log_p = bin_concrete_log_density_var(
                    g,
                    s,
                    prior_logits,
                    self.config.prior_temperature,
                )?;
                let diff = g.sub(log_q, log_p)?;
                let kl_z = g.sum(diff);
                let kl_nu_el = kl_kumaraswamy_beta1_var(g, la, lb, self.config.alpha)?;
                let kl_nu = g.sum(kl_nu_el);
                let y = g.mul(z, a)?;
                (y, Some(z), Some(s), Some(kl_z), Some(kl_nu))
            }
            _ => (a, None, None, None, None),
        };

        let dec_in = match enc.task_logits {
            Some(t) => g.concat_last(y, t)?,
            None => y,
        };
        let logits = self.decoder.forward(g, params, dec_in)?;
        let recon = bernoulli_loglik_var(g, xv, logits)?;

        let inv_n = T::lit(1.0 / n as f64);
        let recon_mean = g.scale(recon, inv_n);
        let kl_a_mean = g.scale(kl_a, inv_n);
        let mut kl_total = kl_a_mean;
        let mut kl_z_value = 0.0;
        let mut kl_nu_value = 0.0;
        if let (Some(kl_z), Some(kl_nu)) = (kl_z, kl_nu) {
            let kl_z_mean = g.scale(kl_z, inv_n);
            let kl_nu_scaled = g.scale(kl_nu, T::lit(1.0 / opts.n_dataset as f64));
            kl_z_value = g.value(kl_z_mean).item().as_f64();
            kl_nu_value = g.value(kl_nu_scaled).item().as_f64();
            kl_total = g.add(kl_total, kl_z_mean)?;
            kl_total = g.add(kl_total, kl_nu_scaled)?;
        }
        let weighted = g.scale(kl_total, T::lit(self.config.beta));
        let total = g.sub(recon_mean, weighted)?;
        let mut loss = g.neg(total);

        let (mut cross_entropy, mut correct) = (None, None);
        if let Some(t) = enc.task_logits {
            if let Some(labels) = opts.labels {
                let xent = g.softmax_xent(t, labels)?;
                let ce = g.mean(xent);
                cross_entropy = Some(g.value(ce).item().as_f64());
                correct = Some(count_correct(g.value(t), labels));
                if opts.zeta_effective != 0.0 {
                    let term = g.scale(ce, T::lit(opts.zeta_effective));
                    loss = g.add(loss, term)?;
                }
            } else if opts.zeta_effective != 0.0 {
                return Err(Error::Precondition(
                    "supervised loss requested without labels".into(),
                ));
            }
        }

        let report = ElboReport::new(
            g.value(recon_mean).item().as_f64(),
            kl_nu_value,
            kl_z_value,
            g.value(kl_a_mean).item().as_f64(),
            self.config.beta,
        );
        Ok(ForwardPass {
            report,
            loss,
            loss_value: g.value(loss).item().as_f64(),
            cross_entropy,
            correct,
            z_pre_sigmoid: s,
            z,
            a,
            y,
            task_logits: enc.task_logits,
            reconstruction_logits: logits,
        })
    }

    /// Evaluate a training pass without gradients. Returns the sampled code,
    /// the reconstruction probabilities `[n, D]` and the report.
    pub fn forward_values(
        &self,
        x: &Tensor<T>,
        noise: &ForwardNoise,
        opts: &ForwardOptions<'_>,
    ) -> Result<(LatentCode, Vec<f64>, ForwardPass)> {
        let mut g = Graph::new();
        let params = self.store.bind_frozen(&mut g);
        let pass = self.forward(&mut g, &params, x, noise, opts)?;
        let n = x.rows();
        let k = self.config.latent_dim;
        let a = g.value(pass.a).to_f64_vec();
        let code = LatentCode {
            rows: n,
            dim: k,
            z: pass
                .z
                .map(|v| g.value(v).to_f64_vec())
                .unwrap_or_else(|| vec![1.0; n * k]),
            y: g.value(pass.y).to_f64_vec(),
            a,
            z_pre_sigmoid: pass
                .z_pre_sigmoid
                .map(|v| g.value(v).to_f64_vec())
                .unwrap_or_default(),
            task_logits: pass.task_logits.map(|v| g.value(v).to_f64_vec()),
        };
        let recon = g
            .value(pass.reconstruction_logits)
            .data()
            .iter()
            .map(|&l| sigmoid(l.as_f64()))
            .collect();
        Ok((code, recon, pass))
    }

    /// Posterior parameters with the sticks at their posterior mean.
    pub fn posterior(&self, x: &Tensor<T>) -> Result<Posterior> {
        let n = self.check_input(x)?;
        let k = self.config.latent_dim;
        let prior_logits: Option<Vec<f64>> = self
            .posterior_mean_pi()
            .map(|pi| pi.iter().map(|&p| logit_clamped(p)).collect());
        let mut out = Posterior {
            rows: n,
            dim: k,
            mask_logits: prior_logits.as_ref().map(|_| Vec::with_capacity(n * k)),
            prior_logits,
            mean: Vec::with_capacity(n * k),
            log_var: Vec::with_capacity(n * k),
            task_logits: (self.config.kind == ModelKind::CIbp)
                .then(|| Vec::with_capacity(n * self.config.num_classes)),
        };
        let d = self.config.input_dim;
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows = EVAL_CHUNK.min(n - start);
            let chunk = Tensor::new(&[rows, d], x.data()[start * d..(start + rows) * d].to_vec())?;
            let enc = self.encoder.encode(&self.store, &chunk)?;
            out.mean.extend(enc.gauss_mean);
            let (lo, hi) = LOG_VAR_RANGE;
            out.log_var
                .extend(enc.gauss_log_var.iter().map(|v| v.clamp(lo, hi)));
            if let (Some(dst), Some(src), Some(prior)) =
                (&mut out.mask_logits, enc.z_logits, &out.prior_logits)
            {
                dst.extend(src.iter().enumerate().map(|(i, v)| v + prior[i % k]));
            }
            if let (Some(dst), Some(src)) = (&mut out.task_logits, enc.task_logits) {
                dst.extend(src);
            }
        }
        Ok(out)
    }

    /// Deterministic code: `z_k = 1` iff the posterior mask probability
    /// exceeds ½, loadings at the posterior mean, `y = z ⊙ a`.
    pub fn eval_encode(&self, x: &Tensor<T>) -> Result<LatentCode> {
        let post = self.posterior(x)?;
        let (n, k) = (post.rows, post.dim);
        let (z, z_pre_sigmoid) = match &post.mask_logits {
            Some(logits) => {
                let tau = self.config.posterior_temperature;
                (
                    logits
                        .iter()
                        .map(|&l| if sigmoid(l) > 0.5 { 1.0 } else { 0.0 })
                        .collect(),
                    logits.iter().map(|&l| l / tau).collect(),
                )
            }
            None => (vec![1.0; n * k], Vec::new()),
        };
        let y = z.iter().zip(&post.mean).map(|(z, a)| z * a).collect();
        Ok(LatentCode {
            rows: n,
            dim: k,
            z,
            a: post.mean,
            y,
            z_pre_sigmoid,
            task_logits: post.task_logits,
        })
    }

    /// Decoder logits for codes `y` (`[n, K]`) and, for c_ibp, the task
    /// representation (`[n, C]`).
    pub fn decode_logits(&self, y: &[f64], task_logits: Option<&[f64]>) -> Result<Vec<f64>> {
        let k = self.config.latent_dim;
        if !y.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!(
                "{} code values for K = {k}",
                y.len()
            )));
        }
        let n = y.len() / k;
        let c = self.config.decoder_input() - k;
        let input: Vec<f64> = match (c, task_logits) {
            (0, _) => y.to_vec(),
            (c, Some(t)) if t.len() == n * c => y
                .chunks(k)
                .zip(t.chunks(c))
                .flat_map(|(a, b)| a.iter().chain(b).copied())
                .collect(),
            _ => {
                return Err(Error::ShapeMismatch(
                    "decoder needs task logits for every row".into(),
                ))
            }
        };
        let width = k + c;
        let mut out = Vec::with_capacity(n * self.config.input_dim);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows = EVAL_CHUNK.min(n - start);
            let mut g = Graph::new();
            let params = self.store.bind_frozen(&mut g);
            let v = g.constant(Tensor::from_f64(
                &[rows, width],
                &input[start * width..(start + rows) * width],
            )?);
            let logits = self.decoder.forward(&mut g, &params, v)?;
            out.extend(g.value(logits).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// Pixel probabilities for codes `y`.
    pub fn decode(&self, y: &[f64], task_logits: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self
            .decode_logits(y, task_logits)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    fn single(&self, x: &[T]) -> Result<LatentCode> {
        let d = self.config.input_dim;
        if x.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "image of {} values, expected {d}",
                x.len()
            )));
        }
        self.eval_encode(&Tensor::new(&[1, d], x.to_vec())?)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.config.latent_dim {
            return Err(Error::Precondition(format!(
                "latent dimension {dim} out of range for K = {}",
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Decode one image while sweeping the loading of `dim` linearly over
    /// `[lo, hi]` with its mask forced on. Returns `steps` frames.
    pub fn latent_traversal(
        &self,
        x: &[T],
        dim: usize,
        lo: f64,
        hi: f64,
        steps: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_dim(dim)?;
        if steps < 2 {
            return Err(Error::Precondition(
                "a traversal needs at least 2 steps".into(),
            ));
        }
        let code = self.single(x)?;
        let k = code.dim;
        let mut ys = Vec::with_capacity(steps * k);
        for s in 0..steps {
            let mut y = code.y.clone();
            y[dim] = lo + (hi - lo) * s as f64 / (steps - 1) as f64;
            ys.extend(y);
        }
        let task: Option<Vec<f64>> = code
            .task_logits
            .as_ref()
            .map(|t| t.iter().cycle().take(t.len() * steps).copied().collect());
        let frames = self.decode(&ys, task.as_deref())?;
        Ok(frames
            .chunks(self.config.input_dim)
            .map(|c| c.to_vec())
            .collect())
    }

    /// Reconstructions of one image as encoded, and with `z_dim` forced to 0.
    pub fn trigger_unit(&self, x: &[T], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(dim)?;
        let code = self.single(x)?;
        let mut off = code.y.clone();
        off[dim] = 0.0;
        let task = code.task_logits.as_deref();
        Ok((self.decode(&code.y, task)?, self.decode(&off, task)?))
    }
}

/// `Σ x·l − softplus(l)`: Bernoulli log-likelihood of `x` under logits `l`,
/// summed over all entries.
fn bernoulli_loglik_var<T: Real>(g: &mut Graph<T>, x: Var, logits: Var) -> Result<Var> {
    let xl = g.mul(x, logits)?;
    let sp = g.softplus(logits);
    let ll = g.sub(xl, sp)?;
    Ok(g.sum(ll))
}

/// Bernoulli log-likelihood of one row under logits.
pub fn bernoulli_loglik(x: &[f64], logits: &[f64]) -> f64 {
    x.iter()
        .zip(logits)
        .map(|(&x, &l)| x * l - softplus(l))
        .sum()
}

fn count_correct<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| argmax(logits.row(r)) == label)
        .count()
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Training pass of an IBP-VAE without gradients.
pub fn ibp_forward<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    noise: &ForwardNoise,
    n_dataset: usize,
) -> Result<(LatentCode, Vec<f64>, ElboReport)> {
    expect_kind(model, ModelKind::Ibp)?;
    let (code, recon, pass) = model.forward_values(x, noise, &ForwardOptions::new(n_dataset))?;
    Ok((code, recon, pass.report))
}

/// Training pass of the Gaussian β-VAE without gradients.
pub fn gaussian_vae_forward<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    noise: &ForwardNoise,
) -> Result<(LatentCode, Vec<f64>, ElboReport)> {
    expect_kind(model, ModelKind::Gaussian)?;
    let (code, recon, pass) = model.forward_values(x, noise, &ForwardOptions::new(x.rows()))?;
    Ok((code, recon, pass.report))
}

/// Loss terms of a cIBP-VAE pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub elbo: ElboReport,
    pub cross_entropy: f64,
    pub zeta_effective: f64,
    /// `−total + ζ_eff · CE`.
    pub loss: f64,
}

/// Training pass of a cIBP-VAE without gradients. Returns the nuisance code,
/// the task logits, the reconstruction and the loss terms.
pub fn cibp_forward<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    noise: &ForwardNoise,
    n_dataset: usize,
    zeta_effective: f64,
) -> Result<(LatentCode, Vec<f64>, Vec<f64>, SupervisedReport)> {
    expect_kind(model, ModelKind::CIbp)?;
    if labels.len() != x.rows() {
        return Err(Error::Precondition(format!(
            "{} labels for {} inputs",
            labels.len(),
            x.rows()
        )));
    }
    let opts = ForwardOptions {
        n_dataset,
        zeta_effective,
        labels: Some(labels),
    };
    let (mut code, recon, pass) = model.forward_values(x, noise, &opts)?;
    let task = code.task_logits.take().unwrap_or_default();
    let report = SupervisedReport {
        elbo: pass.report,
        cross_entropy: pass.cross_entropy.unwrap_or(0.0),
        zeta_effective,
        loss: pass.loss_value,
    };
    Ok((code, task, recon, report))
}

fn expect_kind<T: Real>(model: &Model<T>, kind: ModelKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::Precondition(format!(
            "expected a {} model, got {}",
            kind.as_str(),
            model.kind().as_str()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::mlp(kind, 6, 3, vec![4]);
        if kind == ModelKind::CIbp {
            c.num_classes = 2;
            c.zeta = 1.0;
            c.warmup_epochs = 4;
        }
        c
    }

    fn batch(n: usize, d: usize) -> Tensor<f64> {
        let data = (0..n * d).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn config_rules() {
        let mut c = toy(ModelKind::Ibp);
        c.zeta = 1.0;
        assert!(c.validate().is_err());
        let mut c = toy(ModelKind::CIbp);
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let c = toy(ModelKind::CIbp);
        assert_eq!(c.zeta_effective(2), 0.5);
        assert_eq!(c.zeta_effective(0), 0.0);
        assert_eq!(c.zeta_effective(40), 1.0);
    }

    #[test]
    fn objective_identity_holds() {
        for kind in [ModelKind::Ibp, ModelKind::Gaussian, ModelKind::CIbp] {
            let mut cfg = toy(kind);
            cfg.beta = 3.0;
            let model = Model::<f64>::new(cfg.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let noise = ForwardNoise::sample(&cfg, 5, &mut rng);
            let labels = [0, 1, 1, 0, 1];
            let opts = ForwardOptions {
                n_dataset: 50,
                zeta_effective: 0.0,
                labels: (kind == ModelKind::CIbp).then_some(&labels[..]),
            };
            let (code, recon, pass) = model.forward_values(&batch(5, 6), &noise, &opts).unwrap();
            let r = pass.report;
            assert!(r.is_finite());
            let expect = r.reconstruction_loglik - 3.0 * (r.kl_nu + r.kl_z + r.kl_a);
            assert!((r.total_objective - expect).abs() < 1e-12);
            assert!((pass.loss_value + r.total_objective).abs() < 1e-9);
            assert_eq!(recon.len(), 30);
            for i in 0..15 {
                assert!((code.y[i] - code.z[i] * code.a[i]).abs() < 1e-12);
                assert!(code.z[i] > 0.0 && code.z[i] <= 1.0);
            }
            if kind == ModelKind::Gaussian {
                assert_eq!((r.kl_nu, r.kl_z), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn zero_zeta_matches_unsupervised_total() {
        let cfg = toy(ModelKind::CIbp);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let noise = ForwardNoise::sample(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let labels = [0, 1, 0, 1];
        let (_, task, _, rep) =
            cibp_forward(&model, &batch(4, 6), &labels, &noise, 10, 0.0).unwrap();
        assert_eq!(task.len(), 8);
        assert!((rep.loss + rep.elbo.total_objective).abs() < 1e-12);
        let (_, _, _, rep2) = cibp_forward(&model, &batch(4, 6), &labels, &noise, 10, 2.0).unwrap();
        assert!((rep2.loss - rep.loss - 2.0 * rep2.cross_entropy).abs() < 1e-9);
        assert!(cibp_forward(&model, &batch(4, 6), &labels[..3], &noise, 10, 0.0).is_err());
    }

    #[test]
    fn eval_encode_is_hard_and_deterministic() {
        let cfg = toy(ModelKind::Ibp);
        let model = Model::<f64>::new(cfg).unwrap();
        let x = batch(7, 6);
        let a = model.eval_encode(&x).unwrap();
        let b = model.eval_encode(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.z.iter().all(|&z| z == 0.0 || z == 1.0));
        for i in 0..a.y.len() {
            assert_eq!(a.y[i], a.z[i] * a.a[i]);
        }
    }

    #[test]
    fn masked_out_code_is_zero_vector() {
        let cfg = toy(ModelKind::Ibp);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let mut noise = ForwardNoise::median(&cfg, 2);
        // Very negative logistic noise drives every mask entry to 0.
        noise.logistic = Some(vec![-1e4; 6]);
        let (code, _, _) = model
            .forward_values(&batch(2, 6), &noise, &ForwardOptions::new(2))
            .unwrap();
        assert!(code.y.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn traversal_and_trigger_shapes() {
        let cfg = toy(ModelKind::Ibp);
        let model = Model::<f64>::new(cfg).unwrap();
        let x = batch(1, 6);
        let frames = model.latent_traversal(x.data(), 1, -3.0, 3.0, 2).unwrap();
        assert_eq!(frames.len(), 2);
        let same = model.latent_traversal(x.data(), 1, 0.7, 0.7, 4).unwrap();
        assert!(same.windows(2).all(|w| w[0] == w[1]));
        assert!(model.latent_traversal(x.data(), 3, -3.0, 3.0, 5).is_err());
        assert!(model.latent_traversal(x.data(), 0, -3.0, 3.0, 1).is_err());

        let code = model.eval_encode(&x).unwrap();
        let (on, off) = model.trigger_unit(x.data(), 0).unwrap();
        assert_eq!(on.len(), 6);
        if code.z[0] == 0.0 {
            assert_eq!(on, off);
        }
    }

    #[test]
    fn initial_stick_posterior_equals_prior() {
        let model = Model::<f64>::new(toy(ModelKind::Ibp)).unwrap();
        let (a, b) = model.stick_shapes().unwrap();
        assert!(a.iter().all(|&v| (v - 5.0).abs() < 1e-12));
        assert!(b.iter().all(|&v| v == 1.0));
        let pi = model.posterior_mean_pi().unwrap();
        assert!((pi[2] - (5.0f64 / 6.0).powi(3)).abs() < 1e-12);
    }
}

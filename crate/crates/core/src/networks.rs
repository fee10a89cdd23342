//! Declarative encoder/decoder architectures and their runtime networks.
//!
//! An [`ArchitectureSpec`] is plain data: shapes can be chained and parameters
//! counted without allocating anything. [`Network::build`] registers the
//! parameters in a [`ParamStore`] and returns a handle that runs forward passes
//! on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Real;

/// Width of the MLP encoder/decoder hidden layers.
pub const MNIST_HIDDEN: usize = 500;
/// Hidden width of the supervised task head.
pub const TASK_HIDDEN: usize = 100;
/// Latent size of the dSprites networks.
pub const DSPRITES_LATENT: usize = 10;
pub const DSPRITES_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    ConvTranspose2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    /// Per-sample reshape (batch dimension excluded).
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Per-sample input shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            input_shape,
            layers,
        }
    }

    /// Per-sample shape after every layer, starting with the input.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::ShapeMismatch(format!("{} layer {i}: {msg}", self.name));
            cur = match layer {
                LayerSpec::Linear { units, .. } => {
                    if cur.len() != 1 {
                        return Err(err(format!("linear layer needs a vector, got {cur:?}")));
                    }
                    vec![*units]
                }
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if cur.len() != 3 || cur[1] + 2 * pad < *kernel || cur[2] + 2 * pad < *kernel {
                        return Err(err(format!("conv needs [c, h, w] >= kernel, got {cur:?}")));
                    }
                    vec![
                        *channels,
                        (cur[1] + 2 * pad - kernel) / stride + 1,
                        (cur[2] + 2 * pad - kernel) / stride + 1,
                    ]
                }
                LayerSpec::ConvTranspose2d {
                    channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if cur.len() != 3 {
                        return Err(err(format!("transposed conv needs [c, h, w], got {cur:?}")));
                    }
                    let side = |s: usize| ((s - 1) * stride + kernel).checked_sub(2 * pad);
                    match (side(cur[1]), side(cur[2])) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => vec![*channels, h, w],
                        _ => return Err(err("padding exceeds output".into())),
                    }
                }
                LayerSpec::Reshape { shape } => {
                    if shape.iter().product::<usize>() != cur.iter().product::<usize>() {
                        return Err(err(format!("cannot reshape {cur:?} to {shape:?}")));
                    }
                    shape.clone()
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .pop()
            .expect("at least the input shape"))
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    /// Number of trainable scalars, from the layer dimensions alone.
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.layer_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, input)| match layer {
                LayerSpec::Linear { units, .. } => input[0] * units + units,
                LayerSpec::Conv2d {
                    channels, kernel, ..
                }
                | LayerSpec::ConvTranspose2d {
                    channels, kernel, ..
                } => input[0] * channels * kernel * kernel + channels,
                LayerSpec::Reshape { .. } | LayerSpec::Flatten => 0,
            })
            .sum())
    }
}

#[derive(Clone, Debug)]
enum LayerImpl {
    Linear {
        w: ParamId,
        b: ParamId,
        act: Activation,
    },
    Conv {
        w: ParamId,
        b: ParamId,
        stride: usize,
        pad: usize,
        act: Activation,
        transpose: bool,
    },
    Reshape(Vec<usize>),
}

/// Runtime handle to a network whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    layers: Vec<LayerImpl>,
}

impl Network {
    /// Register parameters under `prefix` and return the network.
    pub fn build<T: Real, R: Rng>(
        spec: &ArchitectureSpec,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (layer, input)) in spec.layers.iter().zip(&shapes).enumerate() {
            let name = |p: &str| format!("{prefix}.{i}.{p}");
            layers.push(match layer {
                LayerSpec::Linear { units, activation } => {
                    let fan_in = input[0];
                    let w =
                        store.add(name("weight"), init_uniform(&[fan_in, *units], fan_in, rng))?;
                    let b = store.add(name("bias"), init_uniform(&[*units], fan_in, rng))?;
                    LayerImpl::Linear {
                        w,
                        b,
                        act: *activation,
                    }
                }
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                } => {
                    let fan_in = input[0] * kernel * kernel;
                    let w = store.add(
                        name("weight"),
                        init_uniform(&[*channels, input[0], *kernel, *kernel], fan_in, rng),
                    )?;
                    let b = store.add(name("bias"), init_uniform(&[*channels], fan_in, rng))?;
                    LayerImpl::Conv {
                        w,
                        b,
                        stride: *stride,
                        pad: *pad,
                        act: *activation,
                        transpose: false,
                    }
                }
                LayerSpec::ConvTranspose2d {
                    channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                } => {
                    let fan_in = channels * kernel * kernel;
                    let w = store.add(
                        name("weight"),
                        init_uniform(&[input[0], *channels, *kernel, *kernel], fan_in, rng),
                    )?;
                    let b = store.add(name("bias"), init_uniform(&[*channels], fan_in, rng))?;
                    LayerImpl::Conv {
                        w,
                        b,
                        stride: *stride,
                        pad: *pad,
                        act: *activation,
                        transpose: true,
                    }
                }
                LayerSpec::Reshape { shape } => LayerImpl::Reshape(shape.clone()),
                LayerSpec::Flatten => LayerImpl::Reshape(vec![input.iter().product::<usize>()]),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    /// Forward pass. `x` is `[n, input_len]` or `[n, ..input_shape]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &Bound, x: Var) -> Result<Var> {
        let n = g.shape(x).first().copied().unwrap_or(0);
        let mut shape = vec![n];
        shape.extend_from_slice(&self.spec.input_shape);
        let mut h = if g.shape(x) == shape.as_slice() {
            x
        } else {
            g.reshape(x, &shape)?
        };
        for layer in &self.layers {
            h = match layer {
                LayerImpl::Linear { w, b, act } => {
                    let m = g.matmul(h, params.var(*w))?;
                    let z = g.add(m, params.var(*b))?;
                    activate(g, z, *act)
                }
                LayerImpl::Conv {
                    w,
                    b,
                    stride,
                    pad,
                    act,
                    transpose,
                } => {
                    let z = if *transpose {
                        g.conv_transpose2d(h, params.var(*w), params.var(*b), *stride, *pad)?
                    } else {
                        g.conv2d(h, params.var(*w), params.var(*b), *stride, *pad)?
                    };
                    activate(g, z, *act)
                }
                LayerImpl::Reshape(s) => {
                    let mut full = vec![n];
                    full.extend_from_slice(s);
                    g.reshape(h, &full)?
                }
            };
        }
        Ok(h)
    }
}

fn activate<T: Real>(g: &mut Graph<T>, z: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => z,
        Activation::Relu => g.relu(z),
        Activation::Sigmoid => g.sigmoid(z),
    }
}

fn linear(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Linear { units, activation }
}

/// Which concrete network pair a model uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    /// Two hidden layers of 500 ReLU units for flattened (colored) MNIST.
    MnistMlp,
    /// Convolutional pair for 64×64 single-channel dSprites images.
    DspritesCnn,
    /// Generic MLP with the given hidden widths (toy and test models).
    Mlp,
}

/// Encoder trunk + head specs and decoder spec for one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitecturePlan {
    pub trunk: ArchitectureSpec,
    pub head_input: usize,
    pub decoder: ArchitectureSpec,
}

/// Trunk of the MLP encoder: two hidden layers of 500 ReLU units.
pub fn mnist_encoder_trunk(input_dim: usize) -> ArchitectureSpec {
    ArchitectureSpec::new(
        "mnist-encoder",
        vec![input_dim],
        vec![
            linear(MNIST_HIDDEN, Activation::Relu),
            linear(MNIST_HIDDEN, Activation::Relu),
        ],
    )
}

/// MLP decoder emitting Bernoulli logits over `output_dim` pixels.
pub fn mnist_decoder_spec(latent: usize, output_dim: usize) -> ArchitectureSpec {
    ArchitectureSpec::new(
        "mnist-decoder",
        vec![latent],
        vec![
            linear(MNIST_HIDDEN, Activation::Relu),
            linear(MNIST_HIDDEN, Activation::Relu),
            linear(output_dim, Activation::Identity),
        ],
    )
}

/// Convolutional dSprites encoder trunk, ending in the 500-unit layer that
/// feeds the three 10-unit heads.
pub fn dsprites_encoder_trunk() -> ArchitectureSpec {
    let conv = |channels| LayerSpec::Conv2d {
        channels,
        kernel: 4,
        stride: 2,
        pad: 1,
        activation: Activation::Relu,
    };
    ArchitectureSpec::new(
        "dsprites-encoder",
        vec![1, DSPRITES_SIDE, DSPRITES_SIDE],
        vec![
            conv(32),
            conv(32),
            conv(32),
            conv(32),
            LayerSpec::Flatten,
            linear(256, Activation::Relu),
            linear(256, Activation::Relu),
            linear(500, Activation::Relu),
        ],
    )
}

/// Convolutional dSprites decoder. The last layer emits logits; the pixel
/// means are their sigmoid.
pub fn dsprites_decoder_spec(latent: usize) -> ArchitectureSpec {
    let convt = |channels, activation| LayerSpec::ConvTranspose2d {
        channels,
        kernel: 4,
        stride: 2,
        pad: 1,
        activation,
    };
    ArchitectureSpec::new(
        "dsprites-decoder",
        vec![latent],
        vec![
            linear(256, Activation::Relu),
            linear(4 * 4 * 32, Activation::Relu),
            LayerSpec::Reshape {
                shape: vec![32, 4, 4],
            },
            convt(32, Activation::Relu),
            convt(32, Activation::Relu),
            convt(32, Activation::Relu),
            convt(1, Activation::Identity),
            LayerSpec::Flatten,
        ],
    )
}

pub fn mlp_encoder_trunk(input_dim: usize, hidden: &[usize]) -> ArchitectureSpec {
    ArchitectureSpec::new(
        "mlp-encoder",
        vec![input_dim],
        hidden
            .iter()
            .map(|&h| linear(h, Activation::Relu))
            .collect(),
    )
}

pub fn mlp_decoder_spec(latent: usize, hidden: &[usize], output_dim: usize) -> ArchitectureSpec {
    let mut layers: Vec<LayerSpec> = hidden
        .iter()
        .rev()
        .map(|&h| linear(h, Activation::Relu))
        .collect();
    layers.push(linear(output_dim, Activation::Identity));
    ArchitectureSpec::new("mlp-decoder", vec![latent], layers)
}

/// A single linear head from the trunk output.
pub fn head_spec(name: &str, input: usize, units: usize) -> ArchitectureSpec {
    ArchitectureSpec::new(name, vec![input], vec![linear(units, Activation::Identity)])
}

/// The supervised head: one hidden layer of 100 ReLU units, then class logits.
pub fn task_head_spec(input: usize, num_classes: usize) -> ArchitectureSpec {
    ArchitectureSpec::new(
        "task-head",
        vec![input],
        vec![
            linear(TASK_HIDDEN, Activation::Relu),
            linear(num_classes, Activation::Identity),
        ],
    )
}

impl ArchitecturePlan {
    /// `decoder_latent` is the width of the decoder input (latent plus any
    /// task representation).
    pub fn new(
        kind: &ArchitectureKind,
        input_dim: usize,
        hidden: &[usize],
        decoder_latent: usize,
    ) -> Result<Self> {
        let plan = match kind {
            ArchitectureKind::MnistMlp => Self {
                trunk: mnist_encoder_trunk(input_dim),
                head_input: MNIST_HIDDEN,
                decoder: mnist_decoder_spec(decoder_latent, input_dim),
            },
            ArchitectureKind::DspritesCnn => {
                if input_dim != DSPRITES_SIDE * DSPRITES_SIDE {
                    return Err(Error::ShapeMismatch(format!(
                        "dSprites networks need 64x64 inputs, got dimension {input_dim}"
                    )));
                }
                Self {
                    trunk: dsprites_encoder_trunk(),
                    head_input: 500,
                    decoder: dsprites_decoder_spec(decoder_latent),
                }
            }
            ArchitectureKind::Mlp => Self {
                trunk: mlp_encoder_trunk(input_dim, hidden),
                head_input: hidden.last().copied().unwrap_or(input_dim),
                decoder: mlp_decoder_spec(decoder_latent, hidden, input_dim),
            },
        };
        if plan.trunk.output_len()? != plan.head_input || plan.decoder.output_len()? != input_dim {
            return Err(Error::ShapeMismatch(format!(
                "architecture {kind:?} does not chain for input dimension {input_dim}"
            )));
        }
        Ok(plan)
    }
}

/// Encoder: shared trunk plus heads for the mask logits `d(x)`, the loading
/// mean and log-variance, and optionally the supervised task logits.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub trunk: Network,
    pub mask_logits: Option<Network>,
    pub mean: Network,
    pub log_var: Network,
    pub task: Option<Network>,
}

/// Graph handles for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub mask_logits: Option<Var>,
    pub mean: Var,
    pub log_var: Var,
    pub task_logits: Option<Var>,
}

/// Numeric encoder outputs for a batch, row-major `[n, K]` (or `[n, C]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub rows: usize,
    pub z_logits: Option<Vec<f64>>,
    pub gauss_mean: Vec<f64>,
    pub gauss_log_var: Vec<f64>,
    pub task_logits: Option<Vec<f64>>,
}

impl Encoder {
    pub fn build<T: Real, R: Rng>(
        plan: &ArchitecturePlan,
        latent: usize,
        with_mask_head: bool,
        num_classes: Option<usize>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if latent == 0 {
            return Err(Error::InvalidParameter("latent size must be >= 1".into()));
        }
        let trunk = Network::build(&plan.trunk, "encoder.trunk", store, rng)?;
        let h = plan.head_input;
        let mask_logits = if with_mask_head {
            Some(Network::build(
                &head_spec("mask-logits", h, latent),
                "encoder.mask_logits",
                store,
                rng,
            )?)
        } else {
            None
        };
        let mean = Network::build(&head_spec("mean", h, latent), "encoder.mean", store, rng)?;
        let log_var = Network::build(
            &head_spec("log-var", h, latent),
            "encoder.log_var",
            store,
            rng,
        )?;
        let task = match num_classes {
            Some(c) if c >= 2 => Some(Network::build(
                &task_head_spec(h, c),
                "encoder.task",
                store,
                rng,
            )?),
            Some(c) => {
                return Err(Error::InvalidParameter(format!(
                    "task head needs at least 2 classes, got {c}"
                )))
            }
            None => None,
        };
        Ok(Self {
            trunk,
            mask_logits,
            mean,
            log_var,
            task,
        })
    }

    /// Analytic parameter count of all encoder parts.
    pub fn param_count(&self) -> Result<usize> {
        let mut n = self.trunk.spec().param_count()?
            + self.mean.spec().param_count()?
            + self.log_var.spec().param_count()?;
        if let Some(m) = &self.mask_logits {
            n += m.spec().param_count()?;
        }
        if let Some(t) = &self.task {
            n += t.spec().param_count()?;
        }
        Ok(n)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Bound,
        x: Var,
    ) -> Result<EncoderVars> {
        let h = self.trunk.forward(g, params, x)?;
        let mask_logits = match &self.mask_logits {
            Some(net) => Some(net.forward(g, params, h)?),
            None => None,
        };
        let mean = self.mean.forward(g, params, h)?;
        let log_var = self.log_var.forward(g, params, h)?;
        let task_logits = match &self.task {
            Some(net) => Some(net.forward(g, params, h)?),
            None => None,
        };
        Ok(EncoderVars {
            mask_logits,
            mean,
            log_var,
            task_logits,
        })
    }

    /// Deterministic numeric encoding of a batch `[n, input_len]`.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &crate::tensor::Tensor<T>,
    ) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let params = store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let vars = self.forward(&mut g, &params, xv)?;
        let rows = g.shape(vars.mean)[0];
        Ok(EncoderOutput {
            rows,
            z_logits: vars.mask_logits.map(|v| g.value(v).to_f64_vec()),
            gauss_mean: g.value(vars.mean).to_f64_vec(),
            gauss_log_var: g.value(vars.log_var).to_f64_vec(),
            task_logits: vars.task_logits.map(|v| g.value(v).to_f64_vec()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dsprites_encoder_halves_spatial_dims() {
        let shapes = dsprites_encoder_trunk().layer_shapes().unwrap();
        let sides: Vec<usize> = shapes[..5].iter().map(|s| s[1]).collect();
        assert_eq!(sides, vec![64, 32, 16, 8, 4]);
        assert_eq!(dsprites_encoder_trunk().output_shape().unwrap(), vec![500]);
    }

    #[test]
    fn dsprites_decoder_maps_latent_to_image() {
        let shapes = dsprites_decoder_spec(10).layer_shapes().unwrap();
        assert_eq!(shapes[3], vec![32, 4, 4]);
        assert_eq!(shapes[7], vec![1, 64, 64]);
        assert_eq!(shapes.last().unwrap(), &vec![4096]);
    }

    #[test]
    fn inconsistent_specs_are_rejected() {
        let bad = ArchitectureSpec::new(
            "bad",
            vec![10],
            vec![LayerSpec::Conv2d {
                channels: 2,
                kernel: 3,
                stride: 1,
                pad: 0,
                activation: Activation::Relu,
            }],
        );
        assert!(bad.output_shape().is_err());
        let bad = ArchitectureSpec::new(
            "bad",
            vec![10],
            vec![LayerSpec::Reshape { shape: vec![3, 3] }],
        );
        assert!(bad.layer_shapes().is_err());
        assert!(ArchitecturePlan::new(&ArchitectureKind::DspritesCnn, 784, &[], 10).is_err());
    }

    #[test]
    fn runtime_shapes_match_declared_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let plan = ArchitecturePlan::new(&ArchitectureKind::DspritesCnn, 4096, &[], 10).unwrap();
        let enc = Encoder::build(&plan, 10, true, None, &mut store, &mut rng).unwrap();
        let dec = Network::build(&plan.decoder, "decoder", &mut store, &mut rng).unwrap();
        assert_eq!(
            store.numel(),
            enc.param_count().unwrap() + plan.decoder.param_count().unwrap()
        );

        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 4096]));
        let out = enc.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.mean), &[2, 10]);
        assert_eq!(g.shape(out.mask_logits.unwrap()), &[2, 10]);
        let y = dec.forward(&mut g, &p, out.mean).unwrap();
        assert_eq!(g.shape(y), &[2, 4096]);
        let probs = g.sigmoid(y);
        assert!(g.value(probs).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

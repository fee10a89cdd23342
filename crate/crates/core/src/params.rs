//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidParameter(format!(
                "duplicate parameter {name}"
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: stored {:?}, given {:?}",
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Bind every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Bind every parameter as a constant (evaluation without gradients).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Fan-in scaled uniform initialization `U(-1/√fan_in, 1/√fan_in)`.
pub fn init_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

/// Adam with the usual default moment parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                first_moment: zeros(),
                second_moment: zeros(),
            },
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let Some(g) = grads.get(bound.vars[i]) else {
                continue;
            };
            let m = self.state.first_moment[i].data_mut();
            let v = self.state.second_moment[i].data_mut();
            for (((p, &gi), mi), vi) in tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `IBPVAECK`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then raw little-endian arrays: every
//! parameter in store order, followed by Adam's first and second moments in
//! the same order. Encoding is deterministic, so save → load → save yields
//! identical bytes.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::params::{Adam, AdamState};
use crate::tensor::{Real, Tensor};
use crate::training::{EpochLog, Trainer};

pub const MAGIC: &[u8; 8] = b"IBPVAECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte ChaCha key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it does not fit in a JSON number).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Format("malformed generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub model: ModelConfig,
    /// Opaque experiment metadata supplied by the caller.
    pub experiment: serde_json::Value,
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: OptimizerHeader,
    pub params: Vec<TensorEntry>,
    pub history: Vec<EpochLog>,
}

/// Serialize a trainer with caller-supplied experiment metadata.
pub fn encode_checkpoint<T: Real>(
    trainer: &Trainer<T>,
    experiment: &serde_json::Value,
) -> Result<Vec<u8>> {
    let store = trainer.model.params();
    let opt = &trainer.optimizer;
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        model: trainer.model.config().clone(),
        experiment: experiment.clone(),
        epoch: trainer.epoch,
        rng: RngState::capture(&trainer.rng),
        optimizer: OptimizerHeader {
            step: opt.state.step,
            learning_rate: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        },
        params: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        history: trainer.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = store.numel() * 3 * T::BYTES;
    let mut out = Vec::with_capacity(20 + json.len() + total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = store
        .iter()
        .map(|(_, t)| t)
        .chain(&opt.state.first_moment)
        .chain(&opt.state.second_moment);
    for t in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parse a checkpoint. Returns the trainer and the experiment metadata.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Trainer<T>, serde_json::Value)> {
    let short = || Error::Format("checkpoint is truncated".into());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(short)?;
    let json = body.get(..hlen).ok_or_else(short)?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut model = Model::<T>::new(header.model.clone())?;
    let expected: Vec<TensorEntry> = model
        .params()
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.params {
        return Err(Error::Format(
            "parameter table does not match the model configuration".into(),
        ));
    }

    let mut data = &body[hlen..];
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let bytes = data.get(..n * T::BYTES).ok_or_else(short)?;
        let values = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        data = &data[n * T::BYTES..];
        Tensor::new(shape, values)
    };
    for entry in &header.params {
        let t = read_tensor(&entry.shape)?;
        model.params_mut().set(&entry.name, t)?;
    }
    let first_moment = header
        .params
        .iter()
        .map(|e| read_tensor(&e.shape))
        .collect::<Result<Vec<_>>>()?;
    let second_moment = header
        .params
        .iter()
        .map(|e| read_tensor(&e.shape))
        .collect::<Result<Vec<_>>>()?;
    if !data.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            data.len()
        )));
    }
    let o = &header.optimizer;
    let optimizer = Adam {
        learning_rate: o.learning_rate,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        state: AdamState {
            step: o.step,
            first_moment,
            second_moment,
        },
    };
    let trainer = Trainer {
        model,
        optimizer,
        epoch: header.epoch,
        rng: header.rng.restore()?,
        history: header.history,
    };
    Ok((trainer, header.experiment))
}

/// Write atomically: a crash mid-write leaves any previous file intact.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    trainer: &Trainer<T>,
    experiment: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(trainer, experiment)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Trainer<T>, serde_json::Value)> {
    decode_checkpoint(&std::fs::read(path)?)
}

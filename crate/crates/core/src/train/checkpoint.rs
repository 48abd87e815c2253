use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Preprocessor;
use crate::error::{data_err, Error, Result};
use crate::model::{ModelConfig, PicnetModel};
use crate::tensor::{AdamState, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"PICNET01";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position; a decimal string because it is 128-bit.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || data_err!("checkpoint: malformed rng state");
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

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PicnetModel,
    pub adam: AdamState,
    pub train_config: TrainConfig,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub preprocessor: Option<Preprocessor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    rng: RngState,
    adam: AdamHeader,
    preprocessor: Option<Preprocessor>,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f64]| {
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            payload.extend(data.iter().flat_map(|v| v.to_le_bytes()));
        };
        for (name, t) in self.model.params().iter() {
            push(format!("{PARAM}{name}"), t.shape(), t.data());
        }
        for (name, t) in self.model.params().iter() {
            if let Some((m, v)) = self.adam.moments(name) {
                push(format!("{MOMENT1}{name}"), t.shape(), m);
                push(format!("{MOMENT2}{name}"), t.shape(), v);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam: AdamHeader {
                step: self.adam.step_count(),
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                epsilon: self.adam.epsilon,
            },
            preprocessor: self.preprocessor.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| data_err!("checkpoint header: {e}"))?;
        let len = u32::try_from(json.len()).map_err(|_| data_err!("checkpoint header too large"))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(data_err!("not a checkpoint: missing PICNET01 magic"));
        }
        let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| data_err!("checkpoint truncated inside header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| data_err!("checkpoint header: {e}"))?;
        if header.format_version != FORMAT_VERSION {
            return Err(data_err!("unsupported checkpoint version {}", header.format_version));
        }
        let payload = &bytes[12 + len..];
        let mut params = ParamSet::new();
        let mut m1: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut m2: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut end = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = payload
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| data_err!("checkpoint truncated in tensor {}", e.name))?;
            end = end.max(e.offset + 8 * n);
            let data: Vec<f64> = slice
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(name) = e.name.strip_prefix(PARAM) {
                params.insert(name, Tensor::new(&e.shape, data)?)?;
            } else if let Some(name) = e.name.strip_prefix(MOMENT1) {
                m1.insert(name.to_string(), data);
            } else if let Some(name) = e.name.strip_prefix(MOMENT2) {
                m2.insert(name.to_string(), data);
            } else {
                return Err(data_err!("checkpoint: unknown tensor {}", e.name));
            }
        }
        if end != payload.len() {
            return Err(data_err!("checkpoint: {} trailing bytes", payload.len() - end));
        }
        let model = PicnetModel::from_params(header.model_config, params)?;
        let mut moments = BTreeMap::new();
        for (name, m) in m1 {
            let v = m2
                .remove(&name)
                .ok_or_else(|| data_err!("checkpoint: second moment of {name} missing"))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = m2.keys().next() {
            return Err(data_err!("checkpoint: first moment of {name} missing"));
        }
        let a = &header.adam;
        let mut adam = AdamState::with_hyper(a.lr, a.beta1, a.beta2, a.epsilon)?;
        adam.restore(a.step, moments)?;
        Ok(Checkpoint {
            model,
            adam,
            train_config: header.train_config,
            rng: header.rng,
            epoch: header.epoch,
            preprocessor: header.preprocessor,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

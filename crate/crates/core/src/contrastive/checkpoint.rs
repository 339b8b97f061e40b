//! Binary model checkpoints: magic, length-prefixed JSON header, little-endian f32 blob.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, ProjectorConfig, SimClr};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DDACKPT1";
const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
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
        let bad = || Error::invalid(format!("malformed rng state {self:?}"));
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder: EncoderConfig,
    projector: ProjectorConfig,
    epoch: usize,
    rng: Option<RngState>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SimClr<f32>,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub rng: Option<RngState>,
    /// Free-form run information such as the config hash.
    pub meta: serde_json::Value,
}

fn entries(model: &SimClr<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (i, b) in model.encoder.blocks.iter().enumerate() {
        out.push((format!("block{i}.weight"), b.weight.shape().to_vec(), b.weight.to_vec()));
        out.push((format!("block{i}.gamma"), b.gamma.shape().to_vec(), b.gamma.to_vec()));
        out.push((format!("block{i}.beta"), b.beta.shape().to_vec(), b.beta.to_vec()));
        out.push((format!("block{i}.running_mean"), vec![b.running_mean.len()], b.running_mean.clone()));
        out.push((format!("block{i}.running_var"), vec![b.running_var.len()], b.running_var.clone()));
    }
    for (name, layer) in [("hidden", &model.projector.hidden), ("output", &model.projector.output)] {
        out.push((format!("{name}.weight"), layer.weight.shape().to_vec(), layer.weight.to_vec()));
        out.push((format!("{name}.bias"), layer.bias.shape().to_vec(), layer.bias.to_vec()));
    }
    out
}

impl Checkpoint {
    pub fn new(model: SimClr<f32>, epoch: usize) -> Self {
        Self {
            model,
            epoch,
            rng: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = entries(&self.model);
        let header = Header {
            version: VERSION,
            encoder: self.model.encoder.config.clone(),
            projector: self.model.projector.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.state_vector().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| fail("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fail(&format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(fail(&format!("unsupported checkpoint version {}", header.version)));
        }
        let mut model = SimClr::new(
            header.encoder.clone(),
            header.projector.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let expected = entries(&model);
        if expected.len() != header.tensors.len() {
            return Err(fail("tensor count does not match the architecture"));
        }
        let mut blob = &bytes[16 + len..];
        let mut values = Vec::with_capacity(expected.len());
        for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(fail(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let n: usize = shape.iter().product();
            let raw = blob.get(..4 * n).ok_or_else(|| fail("truncated tensor data"))?;
            values.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect::<Vec<f32>>(),
            );
            blob = &blob[4 * n..];
        }
        if !blob.is_empty() {
            return Err(fail("trailing bytes after tensor data"));
        }
        let mut values = values.into_iter();
        let mut next = |shape: &[usize]| Tensor::new(shape, values.next().expect("counted above"));
        for b in &mut model.encoder.blocks {
            b.weight = next(b.weight.shape())?;
            b.gamma = next(b.gamma.shape())?;
            b.beta = next(b.beta.shape())?;
            b.running_mean = next(&[b.running_mean.len()])?.to_vec();
            b.running_var = next(&[b.running_var.len()])?.to_vec();
        }
        for layer in [&mut model.projector.hidden, &mut model.projector.output] {
            layer.weight = next(layer.weight.shape())?;
            layer.bias = next(layer.bias.shape())?;
        }
        Ok(Self {
            model,
            epoch: header.epoch,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "MEAS" | version: u8 | header_len: u32 LE | header: JSON | payload
//! ```
//! The header holds the model config, step counter, RNG state, optimizer
//! step and a tensor directory (name, dtype, shape, byte offset into the
//! payload, kind). Payloads are little-endian `f32` in directory order.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEAS";
pub const CHECKPOINT_VERSION: u8 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub value: Tensor<f32>,
}

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, decimal (does not fit a JSON number).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad rng position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Adam step count, when optimizer moments are included.
    pub optimizer_t: Option<u64>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    kind: TensorKind,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    rng: Option<RngState>,
    optimizer_t: Option<u64>,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(Entry {
                name: t.name.clone(),
                dtype: DTYPE.into(),
                shape: t.value.shape().to_vec(),
                offset,
                kind: t.kind,
            });
            offset += 4 * t.value.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_t: self.optimizer_t,
            tensors: entries,
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::InvalidArgument("header too large".into()))?;
        let mut out = Vec::with_capacity(9 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_owned());
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing MEAS magic"));
        }
        let version = *bytes.get(4).ok_or_else(|| corrupt("truncated before version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..9)
            .ok_or_else(|| corrupt("truncated header length"))?
            .try_into()
            .expect("4 bytes");
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(9..9 + header_len)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let payload = &bytes[9 + header_len..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != DTYPE {
                return Err(Error::Corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(Error::Corrupt(format!("tensor `{}` at offset {}, expected {expected}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Corrupt(format!("payload truncated in tensor `{}`", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected += 4 * n as u64;
            tensors.push(NamedTensor {
                name: e.name,
                kind: e.kind,
                value: Tensor::new(&e.shape, data)?,
            });
        }
        if payload.len() as u64 != expected {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        header.config.validate()?;
        Ok(Self {
            config: header.config,
            step: header.step,
            rng: header.rng,
            optimizer_t: header.optimizer_t,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(move |t| t.kind == kind)
    }
}

//! Self-describing weights archive.
//!
//! Layout: the magic bytes `DTW1`, a little-endian `u32` header length, a
//! UTF-8 JSON header holding the [`ModelConfig`] and a tensor manifest
//! (name, shape, byte offset, byte length), then the raw little-endian `f32`
//! tensor data. Offsets are relative to the first byte after the header.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 3] = b"DTW";
pub const FORMAT_VERSION: u8 = b'1';

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a weights archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0:?}")]
    UnsupportedVersion(char),
    #[error("archive truncated: {0}")]
    Truncated(&'static str),
    #[error("archive header is invalid: {0}")]
    Header(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name:?}: byte range {offset}+{length} is invalid for {available} data bytes and shape {shape:?}")]
    BadExtent {
        name: String,
        offset: usize,
        length: usize,
        available: usize,
        shape: Vec<usize>,
    },
    #[error("tensor {name:?} holds a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Transformer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    /// Context window length.
    pub max_seq: usize,
    /// Years; ages are divided by this before scaling the age embedding.
    pub age_scale: f64,
}

impl ModelConfig {
    pub const DEFAULT_AGE_SCALE: f64 = 100.0;

    /// The desk-scale configuration used by the shipped fixtures.
    pub fn toy() -> Self {
        Self {
            vocab_size: 32,
            n_layer: 2,
            n_head: 2,
            n_embd: 16,
            max_seq: 48,
            age_scale: Self::DEFAULT_AGE_SCALE,
        }
    }

    pub fn validate(&self) -> Result<(), ArchiveError> {
        let bad = |msg: String| Err(ArchiveError::Config(msg));
        if self.vocab_size == 0 || self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return bad(format!(
                "n_embd {} is not divisible by n_head {}",
                self.n_embd, self.n_head
            ));
        }
        if self.max_seq < 2 {
            return bad(format!("max_seq must be at least 2, got {}", self.max_seq));
        }
        if !(self.age_scale.is_finite() && self.age_scale > 0.0) {
            return bad(format!("age_scale must be positive, got {}", self.age_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    /// Every tensor the architecture needs, in canonical archive order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e) = (self.vocab_size, self.n_embd);
        let mut out = vec![
            ("tok_emb.weight".to_string(), vec![v, e]),
            ("age_emb.weight".to_string(), vec![e]),
        ];
        for i in 0..self.n_layer {
            let p = |s: &str| format!("blk.{i}.{s}");
            out.extend([
                (p("ln1.gain"), vec![e]),
                (p("ln1.bias"), vec![e]),
                (p("attn.wq"), vec![e, e]),
                (p("attn.wk"), vec![e, e]),
                (p("attn.wv"), vec![e, e]),
                (p("attn.wo"), vec![e, e]),
                (p("ln2.gain"), vec![e]),
                (p("ln2.bias"), vec![e]),
                (p("mlp.w1"), vec![4 * e, e]),
                (p("mlp.b1"), vec![4 * e]),
                (p("mlp.w2"), vec![e, 4 * e]),
                (p("mlp.b2"), vec![e]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![e]),
            ("ln_f.bias".to_string(), vec![e]),
            ("head.weight".to_string(), vec![v, e]),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

/// Model config plus a complete, validated set of named tensors, stored in
/// canonical manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsArchive {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl WeightsArchive {
    /// Validates completeness, shapes and finiteness. Tensors may be given in
    /// any order; they are stored in manifest order.
    pub fn new(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ArchiveError> {
        config.validate()?;
        let manifest = config.manifest();
        let expected: HashMap<&str, &Vec<usize>> =
            manifest.iter().map(|(n, s)| (n.as_str(), s)).collect();

        let mut by_name: HashMap<String, Tensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            if !expected.contains_key(t.name.as_str()) {
                return Err(ArchiveError::UnexpectedTensor(t.name));
            }
            if by_name.contains_key(&t.name) {
                return Err(ArchiveError::DuplicateTensor(t.name));
            }
            by_name.insert(t.name.clone(), t);
        }

        let mut ordered = Vec::with_capacity(manifest.len());
        for (name, shape) in &manifest {
            let t = by_name
                .remove(name)
                .ok_or_else(|| ArchiveError::MissingTensor(name.clone()))?;
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(ArchiveError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape,
                });
            }
            if let Some(index) = t.data.iter().position(|x| !x.is_finite()) {
                return Err(ArchiveError::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
            ordered.push(t);
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    /// An archive with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ArchiveError> {
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(n, s)| Tensor::zeros(n, s))
            .collect();
        Self::new(config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Applies `f` to a named tensor and re-validates the archive.
    pub fn map_tensor(
        mut self,
        name: &str,
        f: impl FnOnce(&mut Tensor),
    ) -> Result<Self, ArchiveError> {
        let t = self
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))?;
        f(t);
        Self::new(self.config, self.tensors)
    }

    pub fn into_parts(self) -> (ModelConfig, Vec<Tensor>) {
        (self.config, self.tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let length = t.data.len() * 4;
            entries.push(ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })
        .expect("header serialization cannot fail");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), ArchiveError> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, ArchiveError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                ArchiveError::Truncated("magic")
            } else {
                ArchiveError::BadMagic
            });
        }
        if &bytes[..3] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        if bytes[3] != FORMAT_VERSION {
            return Err(ArchiveError::UnsupportedVersion(bytes[3] as char));
        }
        let len_bytes: [u8; 4] = bytes
            .get(4..8)
            .ok_or(ArchiveError::Truncated("header length"))?
            .try_into()
            .unwrap();
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(8..8 + header_len)
            .ok_or(ArchiveError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| ArchiveError::Header(e.to_string()))?;
        header.config.validate()?;

        let data = &bytes[8 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let numel: usize = entry.shape.iter().product();
            let range = entry
                .offset
                .checked_add(entry.length)
                .filter(|&end| end <= data.len() && entry.length == numel * 4);
            let Some(end) = range else {
                return Err(ArchiveError::BadExtent {
                    name: entry.name,
                    offset: entry.offset,
                    length: entry.length,
                    available: data.len(),
                    shape: entry.shape,
                });
            };
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(entry.name, entry.shape, values));
        }
        Self::new(header.config, tensors)
    }
}

//! CWRS v1: a binary store of frozen per-layer, per-token vectors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CWRSTOR1"                      8 ASCII bytes
//! header_len: u32                 length of the JSON header record
//! header: UTF-8 JSON              StoreHeader
//! per sentence:
//!     T_s: u32
//!     L · T_s · d f32 values      layer-major: [layer][token][dim]
//! ```
//!
//! The file is read fully into memory; sentence offsets are indexed once and
//! layers are decoded on demand.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensorcore::Tensor2D;

pub const MAGIC: &[u8; 8] = b"CWRSTOR1";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "cwrs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not a CWRS file")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("header/payload inconsistency: {0}")]
    Inconsistent(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported {what}: {value}")]
    Unsupported { what: &'static str, value: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {what} {index} (count {count})")]
    Index { what: &'static str, index: usize, count: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    LE,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    pub model_name: String,
    /// Layer 0 is the lexical/input layer.
    pub num_layers: usize,
    pub dim: usize,
    pub num_sentences: usize,
    pub dtype: DType,
    pub byte_order: ByteOrder,
}

impl StoreHeader {
    pub fn new(model_name: impl Into<String>, num_layers: usize, dim: usize, num_sentences: usize) -> Self {
        Self {
            version: VERSION,
            model_name: model_name.into(),
            num_layers,
            dim,
            num_sentences,
            dtype: DType::F32,
            byte_order: ByteOrder::LE,
        }
    }
}

/// All layers of one sentence, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBlock {
    pub num_layers: usize,
    pub num_tokens: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl SentenceBlock {
    pub fn new(num_layers: usize, num_tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if data.len() != num_layers * num_tokens * dim {
            return Err(StoreError::Dimension(format!(
                "{} values for {num_layers} layers x {num_tokens} tokens x {dim} dims",
                data.len()
            )));
        }
        Ok(Self { num_layers, num_tokens, dim, data })
    }

    /// Builds a block from one `T × d` matrix per layer.
    pub fn from_layers(layers: &[Tensor2D<f32>]) -> Result<Self, StoreError> {
        let first = layers.first().ok_or_else(|| StoreError::Dimension("sentence with no layers".into()))?;
        let (t, d) = first.shape();
        if let Some(l) = layers.iter().position(|m| m.shape() != (t, d)) {
            return Err(StoreError::Dimension(format!(
                "layer {l} is {:?}, layer 0 is {:?}",
                layers[l].shape(),
                (t, d)
            )));
        }
        let data = layers.iter().flat_map(|m| m.data().iter().copied()).collect();
        Self::new(layers.len(), t, d, data)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn layer(&self, layer: usize) -> Tensor2D<f32> {
        let n = self.num_tokens * self.dim;
        Tensor2D::from_vec(self.num_tokens, self.dim, self.data[layer * n..(layer + 1) * n].to_vec())
            .expect("block shape")
    }
}

/// Serialises a store. Every block is validated against the header before
/// any byte reaches `out`.
pub fn write_store<W: Write>(out: &mut W, header: &StoreHeader, sentences: &[SentenceBlock]) -> Result<(), StoreError> {
    let bytes = encode_store(header, sentences)?;
    out.write_all(&bytes).map_err(|source| StoreError::Io { path: "<writer>".into(), source })
}

pub fn encode_store(header: &StoreHeader, sentences: &[SentenceBlock]) -> Result<Vec<u8>, StoreError> {
    validate_header(header)?;
    if header.num_sentences != sentences.len() {
        return Err(StoreError::Dimension(format!(
            "header declares {} sentences, {} given",
            header.num_sentences,
            sentences.len()
        )));
    }
    for (i, s) in sentences.iter().enumerate() {
        if s.num_layers != header.num_layers || s.dim != header.dim {
            return Err(StoreError::Dimension(format!(
                "sentence {i}: {} layers x {} dims, header says {} x {}",
                s.num_layers, s.dim, header.num_layers, header.dim
            )));
        }
        if u32::try_from(s.num_tokens).is_err() {
            return Err(StoreError::Dimension(format!("sentence {i}: token count exceeds u32")));
        }
    }
    let head = serde_json::to_vec(header).map_err(|e| StoreError::Header(e.to_string()))?;
    let payload: usize = sentences.iter().map(|s| 4 + 4 * s.data.len()).sum();
    let mut buf = Vec::with_capacity(12 + head.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for s in sentences {
        buf.extend_from_slice(&(s.num_tokens as u32).to_le_bytes());
        for v in &s.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_store_file(path: &Path, header: &StoreHeader, sentences: &[SentenceBlock]) -> Result<(), StoreError> {
    let bytes = encode_store(header, sentences)?;
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.display().to_string(), source })
}

fn validate_header(h: &StoreHeader) -> Result<(), StoreError> {
    if h.version != VERSION {
        return Err(StoreError::Unsupported { what: "version", value: h.version.to_string() });
    }
    if h.num_layers == 0 || h.dim == 0 {
        return Err(StoreError::Dimension(format!("num_layers {} and dim {} must be >= 1", h.num_layers, h.dim)));
    }
    Ok(())
}

/// A parsed CWRS file. Immutable after construction, so it can be shared
/// across reader threads.
#[derive(Debug, Clone)]
pub struct ReprStore {
    header: StoreHeader,
    bytes: Vec<u8>,
    /// byte offset of each sentence's first f32
    sentence_offsets: Vec<usize>,
    token_counts: Vec<usize>,
}

impl ReprStore {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, StoreError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(StoreError::BadMagic);
        }
        let mut pos = MAGIC.len();
        let head_len = read_u32(&bytes, &mut pos)? as usize;
        need(&bytes, pos, head_len)?;
        let header: StoreHeader =
            serde_json::from_slice(&bytes[pos..pos + head_len]).map_err(|e| StoreError::Header(e.to_string()))?;
        pos += head_len;
        validate_header(&header)?;

        let layer_floats = header.num_layers * header.dim;
        let mut sentence_offsets = Vec::with_capacity(header.num_sentences);
        let mut token_counts = Vec::with_capacity(header.num_sentences);
        for s in 0..header.num_sentences {
            if pos == bytes.len() {
                return Err(StoreError::Inconsistent(format!(
                    "header declares {} sentences, payload holds {s}",
                    header.num_sentences
                )));
            }
            let t = read_u32(&bytes, &mut pos)? as usize;
            let n = t
                .checked_mul(layer_floats)
                .and_then(|v| v.checked_mul(4))
                .ok_or_else(|| StoreError::Inconsistent(format!("sentence {s}: block size overflows")))?;
            need(&bytes, pos, n)?;
            sentence_offsets.push(pos);
            token_counts.push(t);
            pos += n;
        }
        if pos != bytes.len() {
            return Err(StoreError::Inconsistent(format!(
                "{} trailing bytes after {} sentence blocks",
                bytes.len() - pos,
                header.num_sentences
            )));
        }
        Ok(Self { header, bytes, sentence_offsets, token_counts })
    }

    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path).map_err(|source| StoreError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(bytes)
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn num_sentences(&self) -> usize {
        self.header.num_sentences
    }

    pub fn token_counts(&self) -> &[usize] {
        &self.token_counts
    }

    pub fn sentence_offsets(&self) -> &[usize] {
        &self.sentence_offsets
    }

    /// The original file bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// `T_s × d` copy of layer `layer` for sentence `sent`.
    pub fn get_layer(&self, sent: usize, layer: usize) -> Result<Tensor2D<f32>, StoreError> {
        if sent >= self.num_sentences() {
            return Err(StoreError::Index { what: "sentence", index: sent, count: self.num_sentences() });
        }
        if layer >= self.num_layers() {
            return Err(StoreError::Index { what: "layer", index: layer, count: self.num_layers() });
        }
        let (t, d) = (self.token_counts[sent], self.dim());
        let start = self.sentence_offsets[sent] + layer * t * d * 4;
        let data = self.bytes[start..start + t * d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor2D::from_vec(t, d, data).expect("block shape"))
    }

    pub fn sentence_block(&self, sent: usize) -> Result<SentenceBlock, StoreError> {
        let layers = (0..self.num_layers()).map(|l| self.get_layer(sent, l)).collect::<Result<Vec<_>, _>>()?;
        SentenceBlock::from_layers(&layers)
    }
}

fn need(bytes: &[u8], pos: usize, n: usize) -> Result<(), StoreError> {
    let expected = pos as u64 + n as u64;
    if expected > bytes.len() as u64 {
        return Err(StoreError::Truncated { expected, actual: bytes.len() as u64 });
    }
    Ok(())
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, StoreError> {
    need(bytes, *pos, 4)?;
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().expect("4 bytes"));
    *pos += 4;
    Ok(v)
}

//! Parameter checkpoints: `PKCKPT01`, a u32-LE header length, a JSON header,
//! then every parameter buffer as f32-LE in `ParamSet::slices` order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::minictx::{init_contextualizer, Contextualizer, CtxConfig};
use crate::probes::{Head, ProbeConfig, ProbeModel};
use crate::tensorcore::ParamSet;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"PKCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint buffers do not match the model: {0}")]
    Layout(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub lengths: Vec<usize>,
}

pub fn write_params<T: Scalar, P: ParamSet<T>, W: Write>(
    mut w: W,
    kind: &str,
    meta: serde_json::Value,
    params: &P,
) -> Result<(), CheckpointError> {
    let slices = params.slices();
    let header = CheckpointHeader { kind: kind.to_string(), meta, lengths: slices.iter().map(|s| s.len()).collect() };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * params.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in slices {
        for v in s {
            buf.extend_from_slice(&Scalar::to_f32(*v).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Parses the header and returns it with the raw value section.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + n).ok_or_else(|| CheckpointError::Header("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &bytes[12 + n..]))
}

/// Fills `params` (already shaped) from a value section.
pub fn fill_params<T: Scalar, P: ParamSet<T>>(
    header: &CheckpointHeader,
    values: &[u8],
    params: &mut P,
) -> Result<(), CheckpointError> {
    let mut slices = params.slices_mut();
    let lengths: Vec<usize> = slices.iter().map(|s| s.len()).collect();
    if lengths != header.lengths {
        return Err(CheckpointError::Layout(format!("model {lengths:?}, file {:?}", header.lengths)));
    }
    let total: usize = lengths.iter().sum();
    if values.len() != 4 * total {
        return Err(CheckpointError::Layout(format!("{} value bytes, expected {}", values.len(), 4 * total)));
    }
    let mut chunks = values.chunks_exact(4);
    for s in slices.iter_mut() {
        for v in s.iter_mut() {
            *v = <T as Scalar>::from_f32(f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub config: ProbeConfig,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
}

pub fn save_probe<T: Scalar>(path: &Path, model: &ProbeModel<T>, seed: u64) -> Result<(), CheckpointError> {
    let k = match model.config.head {
        Head::Classify(k) => k,
        Head::Regress => 1,
    };
    let meta = ProbeMeta { config: model.config, d: model.input_dim, k, seed };
    let meta = serde_json::to_value(meta).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let file = std::fs::File::create(path)?;
    write_params(std::io::BufWriter::new(file), "probe", meta, &model.params)
}

fn read_file(path: &Path, kind: &str) -> Result<(Vec<u8>, CheckpointHeader), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (header, _) = read_header(&bytes)?;
    if header.kind != kind {
        return Err(CheckpointError::Header(format!("expected a {kind} checkpoint, found {:?}", header.kind)));
    }
    Ok((bytes, header))
}

pub fn save_contextualizer(path: &Path, ctx: &Contextualizer<f32>) -> Result<(), CheckpointError> {
    let meta = serde_json::to_value(&ctx.config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let file = std::fs::File::create(path)?;
    write_params(std::io::BufWriter::new(file), "minictx", meta, &ctx.params)
}

pub fn load_contextualizer(path: &Path) -> Result<Contextualizer<f32>, CheckpointError> {
    let (bytes, header) = read_file(path, "minictx")?;
    let config: CtxConfig = serde_json::from_value(header.meta.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut ctx = init_contextualizer::<f32>(config).map_err(|e| CheckpointError::Header(e.to_string()))?;
    fill_params(&header, read_header(&bytes)?.1, &mut ctx.params)?;
    Ok(ctx)
}

pub fn load_probe(path: &Path) -> Result<(ProbeModel<f32>, ProbeMeta), CheckpointError> {
    let (bytes, header) = read_file(path, "probe")?;
    let values = read_header(&bytes)?.1;
    let meta: ProbeMeta = serde_json::from_value(header.meta.clone()).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut model = ProbeModel::<f32>::new(meta.config, meta.d, meta.seed)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    fill_params(&header, values, &mut model.params)?;
    Ok((model, meta))
}

//! Model file: `GLNR2\0`, u16 format version, u64 header length, JSON
//! header (config, vocabulary, tensor manifest), then little-endian f64
//! payloads in manifest order. All integers little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EncoderParams, ModelConfig};
use crate::tokenizer::Vocabulary;

pub const MODEL_MAGIC: &[u8; 6] = b"GLNR2\0";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("tensor {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("model file truncated: {0}")]
    TruncatedFile(String),
    #[error("model header invalid: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

pub fn write_model<W: Write>(
    mut w: W,
    params: &EncoderParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<(), ModelFileError> {
    let named = params.named();
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let nbytes = (t.len() * 8) as u64;
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                nbytes,
            };
            offset += nbytes;
            entry
        })
        .collect();
    let header = Header {
        config: cfg.clone(),
        vocab: vocab.tokens().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelFileError::Header(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ModelFileError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ModelFileError::TruncatedFile(format!("while reading {what}")),
        _ => ModelFileError::Io(e),
    })
}

pub fn read_model<R: Read>(mut r: R) -> Result<(EncoderParams, ModelConfig, Vocabulary), ModelFileError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ModelFileError::BadMagic,
        _ => ModelFileError::Io(e),
    })?;
    if &magic != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let mut v = [0u8; 2];
    read_exact_or_truncated(&mut r, &mut v, "version")?;
    let found = u16::from_le_bytes(v);
    if found != FORMAT_VERSION {
        return Err(ModelFileError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    read_exact_or_truncated(&mut r, &mut len, "header length")?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() < header_len {
        return Err(ModelFileError::TruncatedFile("header".into()));
    }
    let (header_bytes, payload) = rest.split_at(header_len);
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| ModelFileError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| ModelFileError::Header(e.to_string()))?;
    let vocab = Vocabulary::from_tokens(header.vocab).map_err(ModelFileError::Header)?;
    if vocab.len() != header.config.vocab_size {
        return Err(ModelFileError::ShapeMismatch {
            name: "encoder.token_embeddings".into(),
            detail: format!(
                "vocabulary has {} entries, config says {}",
                vocab.len(),
                header.config.vocab_size
            ),
        });
    }

    let mut params = EncoderParams::zeros(&header.config);
    let mut targets = params.named_mut();
    let mut expected_offset = 0u64;
    for entry in &header.tensors {
        let Some(pos) = targets.iter().position(|(n, _)| *n == entry.name) else {
            return Err(ModelFileError::ShapeMismatch {
                name: entry.name.clone(),
                detail: "not a parameter of this configuration".into(),
            });
        };
        let (name, tensor) = targets.swap_remove(pos);
        if tensor.shape() != entry.shape.as_slice() {
            return Err(ModelFileError::ShapeMismatch {
                name,
                detail: format!("expected {:?}, file has {:?}", tensor.shape(), entry.shape),
            });
        }
        if entry.dtype != "f64" || entry.nbytes != (tensor.len() * 8) as u64 {
            return Err(ModelFileError::ShapeMismatch {
                name,
                detail: format!("unsupported dtype {} / {} bytes", entry.dtype, entry.nbytes),
            });
        }
        if entry.offset != expected_offset {
            return Err(ModelFileError::Header(format!("tensor {name} at unexpected offset")));
        }
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if payload.len() < end {
            return Err(ModelFileError::TruncatedFile(format!("payload of {name}")));
        }
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(payload[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        expected_offset = end as u64;
    }
    if let Some((name, _)) = targets.first() {
        return Err(ModelFileError::TruncatedFile(format!(
            "{} tensors missing from manifest, first {name}",
            targets.len()
        )));
    }
    drop(targets);
    if payload.len() as u64 != expected_offset {
        return Err(ModelFileError::Header(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    if !params.is_finite() {
        return Err(ModelFileError::Header("non-finite parameter values".into()));
    }
    Ok((params, header.config, vocab))
}

pub fn save_model(
    params: &EncoderParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    path: impl AsRef<Path>,
) -> Result<(), ModelFileError> {
    let mut buf = Vec::new();
    write_model(&mut buf, params, cfg, vocab)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(EncoderParams, ModelConfig, Vocabulary), ModelFileError> {
    let bytes = fs::read(path)?;
    read_model(bytes.as_slice())
}

//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `MEMEFUSE`, a little-endian `u64` header length,
//! a JSON header (format version, dtype, model config, vocabulary, stopwords,
//! tensor index), then every tensor's row-major little-endian payload in
//! index order. Identical models serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MemeClassifier, ModelConfig, Preprocessor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{StopWords, Vocabulary};

pub const MAGIC: &[u8; 8] = b"MEMEFUSE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub stopwords: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<F: Scalar>(model: &MemeClassifier<F>, pre: &Preprocessor) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in p.value.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: F::DTYPE.to_string(),
        model: *model.config(),
        vocab: pre.vocab.tokens().to_vec(),
        stopwords: pre.stopwords.to_sorted_vec(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn incompatible(what: &str, left: impl ToString, right: impl ToString) -> Error {
    Error::Incompatible {
        what: what.to_string(),
        left: left.to_string(),
        right: right.to_string(),
    }
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let corrupt = |reason: &str| Error::InvalidArgument(format!("corrupt checkpoint: {reason}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(incompatible("checkpoint format version", header.format_version, FORMAT_VERSION));
    }
    Ok((header, &body[len..]))
}

/// Rebuilds the model and its preprocessing from checkpoint bytes. The
/// stored config must agree with the vocabulary and every tensor shape.
pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<(MemeClassifier<F>, Preprocessor)> {
    let (header, payload) = read_header(bytes)?;
    if header.dtype != F::DTYPE {
        return Err(incompatible("dtype", &header.dtype, F::DTYPE));
    }
    if header.vocab.len() != header.model.text.vocab_size {
        return Err(incompatible("vocabulary size", header.vocab.len(), header.model.text.vocab_size));
    }
    let mut model = MemeClassifier::<F>::new(header.model, 0)?;
    if header.tensors.len() != model.params.len() {
        return Err(incompatible("tensor count", header.tensors.len(), model.params.len()));
    }
    for entry in &header.tensors {
        let id = model
            .params
            .id(&entry.name)
            .ok_or_else(|| incompatible("tensor name", &entry.name, "<none>"))?;
        let expected = model.params.get(id).value.shape().to_vec();
        if entry.shape != expected {
            return Err(incompatible(
                &format!("shape of {}", entry.name),
                format!("{:?}", entry.shape),
                format!("{expected:?}"),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * F::BYTES;
        let chunk = payload
            .get(entry.offset..end)
            .ok_or_else(|| Error::InvalidArgument(format!("corrupt checkpoint: {} truncated", entry.name)))?;
        let data = chunk.chunks_exact(F::BYTES).map(F::read_le).collect();
        model.params.set(id, Tensor::new(entry.shape.clone(), data)?)?;
    }
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let pre = Preprocessor::new(&header.model, StopWords::new(header.stopwords), vocab)?;
    Ok((model, pre))
}

pub fn save<F: Scalar>(path: impl AsRef<Path>, model: &MemeClassifier<F>, pre: &Preprocessor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, pre)).map_err(|e| Error::input(path, e))
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<(MemeClassifier<F>, Preprocessor)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::input(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::InvalidArgument(reason) => Error::input(path, reason),
        other => other,
    })
}

//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "CLABCKP1"
//! header_len u64 LE
//! header     JSON (spec, vocabulary, iteration, tensor names and shapes)
//! tensors    f64 LE, row-major, one blob per tensor in header order
//! ```
//!
//! Tensor order is [`Params::layout`]. Floats are stored raw, so a reload is
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::{ModelSpec, Params};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CLABCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    spec: ModelSpec,
    vocab: String,
    vocab_hash: String,
    iteration: u64,
    epoch: u32,
    val_loss: Option<f64>,
    dropout: f64,
    tensors: Vec<TensorEntry>,
}

/// A model plus the bookkeeping needed to resume or evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub vocab: Vocabulary,
    /// Optimizer iterations completed when the snapshot was taken.
    pub iteration: u64,
    pub epoch: u32,
    pub val_loss: Option<f64>,
    pub dropout: f64,
}

impl Checkpoint {
    pub fn new(params: Params, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != params.spec.vocab_size {
            return Err(Error::Mismatch(format!(
                "vocabulary has {} characters, model expects {}",
                vocab.len(),
                params.spec.vocab_size
            )));
        }
        Ok(Checkpoint {
            params,
            vocab,
            iteration: 0,
            epoch: 0,
            val_loss: None,
            dropout: 0.0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.params.spec
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.params.named_tensors();
        let header = Header {
            format: 1,
            spec: self.params.spec,
            vocab: self.vocab.as_string(),
            vocab_hash: self.vocab.hash(),
            iteration: self.iteration,
            epoch: self.epoch,
            val_loss: self.val_loss,
            dropout: self.dropout,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.spec.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "checkpoint",
            reason,
        };
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic).map_err(|_| bad("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut len = [0u8; 8];
        read_exact(&mut bytes, &mut len).map_err(|_| bad("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if bytes.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[..len])?;
        bytes = &bytes[len..];

        let vocab = Vocabulary::from_id_order(&header.vocab)?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("vocabulary hash mismatch".into()));
        }
        let mut params = Params::zeros(header.spec)?;
        let layout = Params::layout(&header.spec);
        if layout.len() != header.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, header lists {}",
                layout.len(),
                header.tensors.len()
            )));
        }
        for ((name, rows, cols), e) in layout.iter().zip(&header.tensors) {
            if (name, *rows, *cols) != (&e.name, e.rows, e.cols) {
                return Err(bad(format!(
                    "tensor {} has shape {}x{}, expected {name} {rows}x{cols}",
                    e.name, e.rows, e.cols
                )));
            }
        }
        let expected = 8 * header.spec.param_count();
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes of tensor data, found {}",
                bytes.len()
            )));
        }
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                let (head, rest) = bytes.split_at(8);
                *v = f64::from_le_bytes(head.try_into().expect("8-byte chunk"));
                bytes = rest;
            }
        }
        Ok(Checkpoint {
            params,
            vocab,
            iteration: header.iteration,
            epoch: header.epoch,
            val_loss: header.val_loss,
            dropout: header.dropout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(src: &mut &[u8], buf: &mut [u8]) -> std::io::Result<()> {
    src.read_exact(buf)
}

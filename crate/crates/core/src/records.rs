//! Per-position prediction records shared by the neural evaluator, the n-gram
//! evaluator, the analyses and the oracle pipeline.
//!
//! CSV schema: `position,target_id,p_target`. Full distributions, when kept,
//! go to a framed binary dump:
//!
//! ```text
//! magic  8 bytes  "CLABDST1"
//! K      u32 LE
//! count  u64 LE
//! count × { position u64 LE, K × f32 LE }
//! ```

use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Id;
use crate::error::{Error, Result};

/// Probability a model assigned to the character that actually came next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Index of the predicted character in the evaluated stream.
    pub position: usize,
    #[serde(rename = "target_id")]
    pub target: Id,
    pub p_target: f64,
}

/// Floor applied before taking logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn mean_loss(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records.iter().map(|r| -r.p_target.max(PROB_FLOOR).ln()).sum::<f64>() / records.len() as f64
}

/// Standard deviation of the mean per-character loss over `samples`
/// resamples (with replacement) of the positions.
pub fn bootstrap_sigma(records: &[PredictionRecord], samples: usize, seed: u64) -> f64 {
    let n = records.len();
    if n == 0 || samples < 2 {
        return f64::NAN;
    }
    let losses: Vec<f64> = records.iter().map(|r| -r.p_target.max(PROB_FLOOR).ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| losses[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / samples as f64;
    let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / (samples - 1) as f64;
    var.sqrt()
}

pub fn write_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let records: Vec<PredictionRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    validate(&records)?;
    Ok(records)
}

/// Positions strictly increasing, probabilities in `(0, 1]`.
pub fn validate(records: &[PredictionRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[1].position <= w[0].position {
            return Err(Error::Format {
                kind: "prediction records",
                reason: format!("position {} follows {}", w[1].position, w[0].position),
            });
        }
    }
    if let Some(r) = records.iter().find(|r| !(r.p_target > 0.0 && r.p_target <= 1.0)) {
        return Err(Error::Format {
            kind: "prediction records",
            reason: format!("p_target {} at position {} outside (0, 1]", r.p_target, r.position),
        });
    }
    Ok(())
}

/// Full next-character distributions, one row per predicted position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Distributions {
    pub positions: Vec<usize>,
    pub probs: Vec<Vec<f32>>,
}

impl Distributions {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: usize, p: &[f64]) {
        self.positions.push(position);
        self.probs.push(p.iter().map(|&x| x as f32).collect());
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.first().map_or(0, |p| p.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.vocab_size();
        let mut out = Vec::with_capacity(20 + self.len() * (8 + 4 * k));
        out.extend_from_slice(b"CLABDST1");
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (pos, p) in self.positions.iter().zip(&self.probs) {
            out.extend_from_slice(&(*pos as u64).to_le_bytes());
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "distribution dump",
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != b"CLABDST1" {
            return Err(bad("bad magic or truncated header"));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let frame = 8 + 4 * k;
        if bytes.len() != 20 + count * frame {
            return Err(bad("length does not match header"));
        }
        let mut d = Distributions::default();
        for chunk in bytes[20..].chunks_exact(frame) {
            d.positions
                .push(u64::from_le_bytes(chunk[..8].try_into().expect("8 bytes")) as usize);
            d.probs.push(
                chunk[8..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Output of evaluating a model over a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub records: Vec<PredictionRecord>,
    pub distributions: Option<Distributions>,
}

//! Dataset ingestion: vocabulary, contiguous train/val/test splits, and the
//! striped minibatch cursor used for truncated backpropagation through time.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense character id.
pub type Id = u32;

/// Bijection between the characters of a corpus and `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, Id>,
}

impl Vocabulary {
    /// Collects the distinct characters of `text`, sorted by scalar value.
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Empty("corpus text"));
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Ok(Self::from_chars(chars))
    }

    /// Rebuilds a vocabulary from its characters in id order (as stored in
    /// manifests and checkpoints).
    pub fn from_id_order(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            return Err(Error::Format {
                kind: "vocabulary",
                reason: "duplicate characters".into(),
            });
        }
        Ok(Self::from_chars(chars))
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i as Id)).collect();
        Vocabulary { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<Id> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: Id) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Id>> {
        text.chars()
            .map(|c| self.id(c).ok_or(Error::OutOfVocabulary(c)))
            .collect()
    }

    pub fn decode(&self, ids: &[Id]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.char(i).ok_or(Error::IdOutOfRange {
                    id: i as usize,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// Characters in id order, as one string.
    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    /// Hex SHA-256 of [`as_string`](Self::as_string); ties checkpoints and
    /// n-gram models to the vocabulary they were built with.
    pub fn hash(&self) -> String {
        sha256_hex(self.as_string().as_bytes())
    }

    pub fn check_ids(&self, ids: &[Id]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.len()) {
            Some(&i) => Err(Error::IdOutOfRange {
                id: i as usize,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a UTF-8 text file, reporting the byte offset of the first invalid
/// sequence.
pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Split fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        SplitRatios { train, val, test }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be positive, got {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios::new(0.8, 0.1, 0.1)
    }
}

/// Contiguous, in-order train/val/test partition of an encoded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<Id>,
    pub val: Vec<Id>,
    pub test: Vec<Id>,
    pub ratios: SplitRatios,
}

impl CorpusSplits {
    /// Cuts at `floor(f_train·len)` and `floor(f_train·len) + floor(f_val·len)`;
    /// whatever floor rounding leaves over goes to the test split.
    pub fn split(ids: &[Id], ratios: SplitRatios) -> Result<Self> {
        ratios.validate()?;
        let (b1, b2) = split_boundaries(ids.len(), ratios);
        Ok(CorpusSplits {
            train: ids[..b1].to_vec(),
            val: ids[b1..b2].to_vec(),
            test: ids[b2..].to_vec(),
            ratios,
        })
    }

    pub fn boundaries(&self) -> [usize; 3] {
        let b1 = self.train.len();
        let b2 = b1 + self.val.len();
        [b1, b2, b2 + self.test.len()]
    }

    /// Every split must hold at least one full unroll window plus its target.
    pub fn check_trainable(&self, unroll: usize) -> Result<()> {
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if s.len() < unroll + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{name} split has {} ids, need at least {}",
                    s.len(),
                    unroll + 1
                )));
            }
        }
        Ok(())
    }
}

pub fn split_boundaries(len: usize, ratios: SplitRatios) -> (usize, usize) {
    let b1 = (ratios.train * len as f64).floor() as usize;
    let b2 = b1 + (ratios.val * len as f64).floor() as usize;
    (b1.min(len), b2.min(len))
}

/// One `B×T` training window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<Id>>,
    pub targets: Vec<Vec<Id>>,
    /// This was the last window of the epoch: the cursor has been rewound
    /// and carried hidden state must be reset before the next batch.
    pub epoch_wrapped: bool,
}

/// Stateful striping of the training split into `B` contiguous stripes,
/// consumed `T` characters at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchCursor {
    batch: usize,
    unroll: usize,
    stripe_len: usize,
    offsets: Vec<usize>,
    step: usize,
    windows_per_epoch: usize,
}

impl BatchCursor {
    pub fn new(train_len: usize, batch: usize, unroll: usize) -> Result<Self> {
        if batch == 0 || unroll == 0 {
            return Err(Error::InvalidArgument(
                "batch size and unroll length must be positive".into(),
            ));
        }
        let stripe_len = train_len / batch;
        // the final window needs one extra character for its last target
        let windows_per_epoch = stripe_len.saturating_sub(1) / unroll;
        if windows_per_epoch == 0 {
            return Err(Error::InvalidArgument(format!(
                "training split of {train_len} ids is too short for B={batch}, T={unroll}"
            )));
        }
        Ok(BatchCursor {
            batch,
            unroll,
            stripe_len,
            offsets: (0..batch).map(|b| b * stripe_len).collect(),
            step: 0,
            windows_per_epoch,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn unroll(&self) -> usize {
        self.unroll
    }

    pub fn stripe_len(&self) -> usize {
        self.stripe_len
    }

    pub fn stripe_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows_per_epoch
    }

    /// Index of the next window within the current epoch.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn next_batch(&mut self, train: &[Id]) -> Batch {
        let start = self.step * self.unroll;
        let mut inputs = Vec::with_capacity(self.batch);
        let mut targets = Vec::with_capacity(self.batch);
        for &off in &self.offsets {
            let s = off + start;
            inputs.push(train[s..s + self.unroll].to_vec());
            targets.push(train[s + 1..s + self.unroll + 1].to_vec());
        }
        self.step += 1;
        let epoch_wrapped = self.step == self.windows_per_epoch;
        if epoch_wrapped {
            self.step = 0;
        }
        Batch {
            inputs,
            targets,
            epoch_wrapped,
        }
    }
}

/// Dataset description written next to the encoded splits; downstream
/// artifacts check `content_sha256` and `vocab` against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Vocabulary characters in id order.
    pub vocab: String,
    pub vocab_size: usize,
    pub ratios: SplitRatios,
    /// `[end of train, end of val, end of test]` in character offsets.
    pub boundaries: [usize; 3],
    pub total_chars: usize,
    pub content_sha256: String,
}

impl DatasetManifest {
    pub fn new(text: &str, vocab: &Vocabulary, splits: &CorpusSplits) -> Self {
        DatasetManifest {
            vocab: vocab.as_string(),
            vocab_size: vocab.len(),
            ratios: splits.ratios,
            boundaries: splits.boundaries(),
            total_chars: splits.boundaries()[2],
            content_sha256: sha256_hex(text.as_bytes()),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_id_order(&self.vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// A fully prepared dataset: text, vocabulary and splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub text: String,
    pub vocab: Vocabulary,
    pub splits: CorpusSplits,
}

impl Dataset {
    pub fn from_text(text: String, ratios: SplitRatios) -> Result<Self> {
        let vocab = Vocabulary::build(&text)?;
        let ids = vocab.encode(&text)?;
        let splits = CorpusSplits::split(&ids, ratios)?;
        Ok(Dataset { text, vocab, splits })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::new(&self.text, &self.vocab, &self.splits)
    }

    /// Text of the test split.
    pub fn test_text(&self) -> String {
        let [_, b2, _] = self.splits.boundaries();
        self.text.chars().skip(b2).collect()
    }

    /// Text of the training split.
    pub fn train_text(&self) -> String {
        self.text.chars().take(self.splits.train.len()).collect()
    }
}

pub fn write_ids(path: &Path, ids: &[Id]) -> Result<()> {
    let mut bytes = Vec::with_capacity(ids.len() * 4);
    for id in ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ids(path: &Path) -> Result<Vec<Id>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            kind: "id file",
            reason: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| Id::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

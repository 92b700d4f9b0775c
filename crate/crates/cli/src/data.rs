//! Prepared dataset directories written by `charlab prep`.

use std::path::Path;

use charlab::corpus::{read_ids, write_ids, CorpusSplits, DatasetManifest, Id, Vocabulary};
use charlab::{Error, Result};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const SPLIT_FILES: [&str; 3] = ["train.ids", "val.ids", "test.ids"];

pub struct Prepared {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub splits: CorpusSplits,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(DATASET_MANIFEST))?;
        let vocab = manifest.vocabulary()?;
        if vocab.len() != manifest.vocab_size {
            return Err(Error::Mismatch(
                "dataset manifest vocabulary size disagrees with its characters".into(),
            ));
        }
        let [train, val, test] = SPLIT_FILES.map(|f| read_ids(&dir.join(f)));
        let (train, val, test) = (train?, val?, test?);
        let [b0, b1, b2] = manifest.boundaries;
        if train.len() != b0 || val.len() != b1 - b0 || test.len() != b2 - b1 {
            return Err(Error::Mismatch(format!(
                "split files in {} disagree with the manifest",
                dir.display()
            )));
        }
        for ids in [&train, &val, &test] {
            vocab.check_ids(ids)?;
        }
        let splits = CorpusSplits {
            train,
            val,
            test,
            ratios: manifest.ratios,
        };
        Ok(Prepared {
            manifest,
            vocab,
            splits,
        })
    }

    pub fn save(dir: &Path, manifest: &DatasetManifest, splits: &CorpusSplits) -> Result<()> {
        manifest.save(&dir.join(DATASET_MANIFEST))?;
        for (f, ids) in SPLIT_FILES.iter().zip([&splits.train, &splits.val, &splits.test]) {
            write_ids(&dir.join(f), ids)?;
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[Id]> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "test" => Ok(&self.splits.test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (train, val, test)"
            ))),
        }
    }

    /// Characters of a split, for text-level analyses.
    pub fn split_chars(&self, name: &str) -> Result<Vec<char>> {
        Ok(self.vocab.decode(self.split(name)?)?.chars().collect())
    }
}

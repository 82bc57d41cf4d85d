use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::{Error, Result};

pub const EMBEDDING_DIM: usize = 768;

const INDEX_FILE: &str = "index.json";
const VECTORS_FILE: &str = "vectors.bin";
const STORE_FORMAT: &str = "m2fn-embeddings";
const STORE_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

/// What a lookup of unknown text returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Error,
    Zeros,
}

/// Fixed-dimension text embeddings keyed by the exact text.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    missing: MissingPolicy,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    text: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    sha256: String,
    entries: Vec<IndexEntry>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
            missing: MissingPolicy::Error,
        }
    }

    pub fn with_missing(mut self, policy: MissingPolicy) -> Self {
        self.missing = policy;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, text: impl Into<String>, v: Vec<f64>) -> std::result::Result<(), DataError> {
        if v.len() != self.dim {
            return Err(DataError::Invalid(format!("vector has {} values, store dim is {}", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DataError::Invalid("non-finite embedding value".into()));
        }
        self.vectors.insert(text.into(), v);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<&[f64]> {
        self.vectors.get(text).map(Vec::as_slice)
    }

    pub fn lookup(&self, text: &str) -> std::result::Result<Vec<f64>, DataError> {
        match (self.vectors.get(text), self.missing) {
            (Some(v), _) => Ok(v.clone()),
            (None, MissingPolicy::Zeros) => Ok(vec![0.0; self.dim]),
            (None, MissingPolicy::Error) => Err(DataError::MissingEmbedding(text.to_string())),
        }
    }

    /// Writes `vectors.bin` (records of sha256(text) followed by the vector
    /// as little-endian f64) and `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bin = Vec::with_capacity(self.vectors.len() * (HASH_LEN + 8 * self.dim));
        let mut entries = Vec::with_capacity(self.vectors.len());
        for (text, v) in &self.vectors {
            entries.push(IndexEntry {
                text: text.clone(),
                offset: bin.len() as u64,
            });
            bin.extend_from_slice(&Sha256::digest(text.as_bytes()));
            for x in v {
                bin.extend_from_slice(&x.to_le_bytes());
            }
        }
        let index = Index {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            dim: self.dim,
            count: entries.len(),
            sha256: hex::encode(Sha256::digest(&bin)),
            entries,
        };
        let vp = dir.join(VECTORS_FILE);
        fs::write(&vp, &bin).map_err(|e| Error::io(&vp, e))?;
        let ip = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&ip, json).map_err(|e| Error::io(&ip, e))
    }

    /// Loads a store written by [`save`](Self::save), verifying the file
    /// checksum, record count, record bounds and each record's text hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let ip = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", ip.display())))?;
        let bad = |m: String| -> Error { DataError::Integrity(m).into() };
        if index.format != STORE_FORMAT || index.version != STORE_VERSION {
            return Err(bad(format!("unsupported store {} v{}", index.format, index.version)));
        }
        if index.dim == 0 {
            return Err(bad("zero embedding dim".into()));
        }
        let vp = dir.join(VECTORS_FILE);
        let bin = fs::read(&vp).map_err(|e| Error::io(&vp, e))?;
        if hex::encode(Sha256::digest(&bin)) != index.sha256 {
            return Err(bad(format!("{} does not match its checksum", vp.display())));
        }
        let rec = HASH_LEN + 8 * index.dim;
        if index.count != index.entries.len() || bin.len() != rec * index.count {
            return Err(bad(format!(
                "{} entries, {} declared, {} bytes for {}-dim records",
                index.entries.len(),
                index.count,
                bin.len(),
                index.dim
            )));
        }
        let mut store = Self::new(index.dim);
        for e in index.entries {
            let off = e.offset as usize;
            if off % rec != 0 || off + rec > bin.len() {
                return Err(bad(format!("entry {:?} has out-of-range offset {off}", e.text)));
            }
            if bin[off..off + HASH_LEN] != Sha256::digest(e.text.as_bytes())[..] {
                return Err(bad(format!("record at {off} is not the vector for {:?}", e.text)));
            }
            let v = bin[off + HASH_LEN..off + rec]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(e.text, v)?;
        }
        Ok(store)
    }
}

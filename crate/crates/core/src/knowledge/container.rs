//! On-disk embedding container: `index.json` plus `embeddings.bin`.
//!
//! Each entry in `embeddings.bin` is `m·d_k` little-endian `f32` values
//! followed by the CRC32 of those bytes (little-endian `u32`). The index maps
//! molecule ids to `{offset, m, d_k}` with `offset` in bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::KnowledgeEmbedding;
use super::KnowledgeError;
use crate::numkit::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const DATA_FILE: &str = "embeddings.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub m: usize,
    pub d_k: usize,
    #[serde(default)]
    pub provider_id: String,
    #[serde(default)]
    pub text_hash: String,
}

/// Loaded embeddings keyed by molecule id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, KnowledgeEmbedding>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, e: KnowledgeEmbedding) {
        self.entries.insert(id.into(), e);
    }

    pub fn get(&self, id: &str) -> Result<&KnowledgeEmbedding, KnowledgeError> {
        self.entries
            .get(id)
            .ok_or_else(|| KnowledgeError::MissingId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &KnowledgeEmbedding)> {
        self.entries.iter()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(KnowledgeEmbedding::dim)
    }
}

/// Writes only the unmasked rows of each entry; values are narrowed to `f32`.
pub fn save_embeddings(dir: &Path, store: &EmbeddingStore) -> Result<(), KnowledgeError> {
    if let Some(d) = store.dim() {
        if let Some((id, bad)) = store.iter().find(|(_, e)| e.dim() != d) {
            return Err(KnowledgeError::Shape {
                id: id.clone(),
                msg: format!("d_k {} differs from {d}", bad.dim()),
            });
        }
    }
    fs::create_dir_all(dir)?;
    let mut index = BTreeMap::new();
    let mut bin = Vec::new();
    for (id, e) in store.iter() {
        let start = bin.len();
        let mut m = 0;
        for r in 0..e.len() {
            if !e.mask[r] {
                continue;
            }
            m += 1;
            for &x in e.tokens.row(r) {
                bin.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&bin[start..]);
        bin.extend_from_slice(&crc.to_le_bytes());
        index.insert(
            id.clone(),
            IndexEntry {
                offset: start as u64,
                m,
                d_k: e.dim(),
                provider_id: e.provider_id.clone(),
                text_hash: e.text_hash.clone(),
            },
        );
    }
    let mut f = fs::File::create(dir.join(DATA_FILE))?;
    f.write_all(&bin)?;
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads and validates every entry: uniform `d_k`, in-bounds extents,
/// checksums and finiteness.
pub fn load_embeddings(dir: &Path) -> Result<EmbeddingStore, KnowledgeError> {
    let index: BTreeMap<String, IndexEntry> =
        serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    let bin = fs::read(dir.join(DATA_FILE))?;
    let mut store = EmbeddingStore::new();
    let mut dim = None;
    for (id, entry) in index {
        let shape_err = |msg: String| KnowledgeError::Shape {
            id: id.clone(),
            msg,
        };
        if entry.m == 0 || entry.d_k == 0 {
            return Err(shape_err(format!("empty entry {}×{}", entry.m, entry.d_k)));
        }
        match dim {
            None => dim = Some(entry.d_k),
            Some(d) if d != entry.d_k => {
                return Err(shape_err(format!("d_k {} differs from {d}", entry.d_k)))
            }
            _ => {}
        }
        let n = entry.m * entry.d_k;
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end + 4 > bin.len() {
            return Err(KnowledgeError::Checksum { id });
        }
        let payload = &bin[start..end];
        let stored = u32::from_le_bytes(bin[end..end + 4].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(KnowledgeError::Checksum { id });
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(KnowledgeError::NonFinite { id });
        }
        let e = KnowledgeEmbedding {
            tokens: Tensor::new(vec![entry.m, entry.d_k], data).expect("m × d_k"),
            mask: vec![true; entry.m],
            provider_id: entry.provider_id,
            text_hash: entry.text_hash,
        };
        store.insert(id, e);
    }
    Ok(store)
}

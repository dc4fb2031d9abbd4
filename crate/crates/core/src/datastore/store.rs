//! Sharded half-precision key-value store for teacher embeddings.
//!
//! Records are sorted by key across the whole store and cut into shards of
//! `shard_size` records. `store.json` lists each shard's file, key range and
//! record count. A shard file is laid out as (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "TAPEMB01"
//! dim        u32
//! count      u32
//! index_off  u64      byte offset of the index section
//! records    count × { key_len u32 | key bytes | crc32 u32 | dim × f16 }
//! index      count × { key_len u32 | key bytes | record_off u64 }, sorted by key
//! ```
//!
//! The CRC-32 covers the key bytes followed by the f16 payload bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHARD_MAGIC: &[u8; 8] = b"TAPEMB01";
pub const DEFAULT_SHARD_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub region_id: String,
    pub values: Vec<f16>,
}

impl EmbeddingRecord {
    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|v| v.to_f32()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreIndex {
    dim: usize,
    shard_size: usize,
    shards: Vec<ShardInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ShardInfo {
    file: String,
    first_key: String,
    last_key: String,
    count: usize,
}

pub struct EmbeddingStoreWriter {
    dir: PathBuf,
    dim: usize,
    shard_size: usize,
    records: BTreeMap<String, Vec<f16>>,
}

impl EmbeddingStoreWriter {
    pub fn create(dir: &Path, dim: usize, shard_size: usize) -> Result<Self> {
        if dim == 0 || shard_size == 0 {
            return Err(Error::InvalidConfig("dim and shard_size must be positive".into()));
        }
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            dim,
            shard_size,
            records: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, region_id: &str, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        if region_id.is_empty() {
            return Err(Error::InvalidConfig("empty region id".into()));
        }
        let half: Vec<f16> = values.iter().map(|v| f16::from_f32(*v)).collect();
        if self.records.insert(region_id.to_owned(), half).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate region id {region_id}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes all shards and the store index, sealing the store.
    pub fn finish(self) -> Result<EmbeddingStore> {
        let entries: Vec<(&String, &Vec<f16>)> = self.records.iter().collect();
        let mut shards = Vec::new();
        for (s, chunk) in entries.chunks(self.shard_size).enumerate() {
            let file = format!("emb-{s:05}.bin");
            fs::write(self.dir.join(&file), encode_shard(self.dim, chunk))?;
            shards.push(ShardInfo {
                file,
                first_key: chunk[0].0.clone(),
                last_key: chunk[chunk.len() - 1].0.clone(),
                count: chunk.len(),
            });
        }
        let index = StoreIndex {
            dim: self.dim,
            shard_size: self.shard_size,
            shards,
        };
        fs::write(self.dir.join("store.json"), serde_json::to_vec_pretty(&index)?)?;
        EmbeddingStore::open(&self.dir)
    }
}

fn encode_shard(dim: usize, records: &[(&String, &Vec<f16>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    let mut offsets = Vec::with_capacity(records.len());
    for (key, values) in records {
        offsets.push(out.len() as u64);
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(key.as_bytes());
        hasher.update(&payload);
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
        out.extend_from_slice(&payload);
    }
    let index_off = out.len() as u64;
    out[16..24].copy_from_slice(&index_off.to_le_bytes());
    for ((key, _), off) in records.iter().zip(offsets) {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&off.to_le_bytes());
    }
    out
}

struct Shard {
    bytes: Vec<u8>,
    index: Vec<(String, u64)>,
}

/// Read side of the store. Shards are loaded on first access and then read
/// without locking.
pub struct EmbeddingStore {
    dir: PathBuf,
    index: StoreIndex,
    shards: Vec<OnceLock<std::result::Result<Shard, String>>>,
}

impl EmbeddingStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let index: StoreIndex = serde_json::from_slice(&fs::read(dir.join("store.json"))?)?;
        let shards = index.shards.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            shards,
        })
    }

    pub fn dim(&self) -> usize {
        self.index.dim
    }

    pub fn len(&self) -> usize {
        self.index.shards.iter().map(|s| s.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_shards(&self) -> usize {
        self.index.shards.len()
    }

    fn corrupt(&self, shard: usize, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.dir.join(&self.index.shards[shard].file),
            reason: reason.into(),
        }
    }

    fn shard(&self, s: usize) -> Result<&Shard> {
        let loaded = self.shards[s].get_or_init(|| {
            let path = self.dir.join(&self.index.shards[s].file);
            let bytes = fs::read(&path).map_err(|e| e.to_string())?;
            parse_shard(bytes, self.index.dim)
        });
        loaded.as_ref().map_err(|r| self.corrupt(s, r.clone()))
    }

    /// Keys of one shard in index order.
    pub fn shard_keys(&self, s: usize) -> Result<Vec<String>> {
        Ok(self.shard(s)?.index.iter().map(|(k, _)| k.clone()).collect())
    }

    pub fn keys(&self) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.len());
        for s in 0..self.num_shards() {
            out.extend(self.shard_keys(s)?);
        }
        Ok(out)
    }

    pub fn read_embedding(&self, region_id: &str) -> Result<EmbeddingRecord> {
        let not_found = || Error::NotFound(region_id.to_owned());
        let s = self
            .index
            .shards
            .partition_point(|info| info.last_key.as_str() < region_id);
        if s >= self.num_shards() || self.index.shards[s].first_key.as_str() > region_id {
            return Err(not_found());
        }
        let shard = self.shard(s)?;
        let pos = shard
            .index
            .binary_search_by(|(k, _)| k.as_str().cmp(region_id))
            .map_err(|_| not_found())?;
        let off = shard.index[pos].1 as usize;
        let dim = self.index.dim;
        let b = &shard.bytes;
        let key_len = read_u32(b, off).ok_or_else(|| self.corrupt(s, "truncated record"))? as usize;
        let key_end = off + 4 + key_len;
        let payload_start = key_end + 4;
        let payload_end = payload_start + 2 * dim;
        if payload_end > b.len() {
            return Err(self.corrupt(s, "truncated record"));
        }
        let key = &b[off + 4..key_end];
        if key != region_id.as_bytes() {
            return Err(self.corrupt(s, format!("index points at wrong record for {region_id}")));
        }
        let stored_crc = read_u32(b, key_end).expect("bounds checked");
        let payload = &b[payload_start..payload_end];
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(key);
        hasher.update(payload);
        if hasher.finalize() != stored_crc {
            return Err(self.corrupt(s, format!("checksum mismatch for {region_id}")));
        }
        Ok(EmbeddingRecord {
            region_id: region_id.to_owned(),
            values: payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]))
                .collect(),
        })
    }
}

fn read_u32(b: &[u8], off: usize) -> Option<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
}

fn parse_shard(bytes: Vec<u8>, dim: usize) -> std::result::Result<Shard, String> {
    if bytes.len() < 24 || &bytes[..8] != SHARD_MAGIC {
        return Err("bad shard header".into());
    }
    let file_dim = read_u32(&bytes, 8).unwrap() as usize;
    if file_dim != dim {
        return Err(format!("shard dim {file_dim} != store dim {dim}"));
    }
    let count = read_u32(&bytes, 12).unwrap() as usize;
    let mut off = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let klen = read_u32(&bytes, off).ok_or("truncated index")? as usize;
        let key = bytes
            .get(off + 4..off + 4 + klen)
            .ok_or("truncated index")?;
        let key = String::from_utf8(key.to_vec()).map_err(|_| "non-utf8 key")?;
        let roff = bytes
            .get(off + 4 + klen..off + 12 + klen)
            .ok_or("truncated index")?;
        index.push((key, u64::from_le_bytes(roff.try_into().unwrap())));
        off += 12 + klen;
    }
    if index.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err("shard index not sorted".into());
    }
    Ok(Shard { bytes, index })
}

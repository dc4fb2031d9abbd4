//! Checkpoint file format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TAPCKPT1"
//! header_len   u64
//! header       JSON      CheckpointHeader
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32, name UTF-8 bytes
//!   rank       u32, dims u64 × rank
//!   data       f32 × Π dims, row-major
//! crc32        u32       over every byte after the magic
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAPCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// ChaCha8 position: seed, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub phase: Phase,
    pub config: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    pub optimizer_step: u64,
    /// Named generator states (`sampling`, `noise`).
    pub rngs: BTreeMap<String, RngState>,
    /// Concept names in column order of the stored weight matrices.
    pub concepts: Vec<String>,
    /// Tokenizer merges, present once a caption model exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merges: Option<Vec<(u32, u32)>>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = Vec::new();
        let header = serde_json::to_vec(&self.header)?;
        body.extend_from_slice(&(header.len() as u64).to_le_bytes());
        body.extend_from_slice(&header);
        body.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&body);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&body)?;
        f.write_all(&crc.to_le_bytes())?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let hlen = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen).ok_or_else(|| corrupt("truncated header"))?)?;
        let count = r.u32().ok_or_else(|| corrupt("truncated"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor().ok_or_else(|| corrupt("truncated tensor"))?;
            tensors.insert(name, t?);
        }
        Ok(Self { header, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Result<Tensor>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let data: Vec<f32> = self
            .take(len.checked_mul(4)?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(data, dims, &Device::Cpu).map_err(Error::from);
        Some((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_owned(),
            Tensor::new(&[[1f32, 2.5], [-3.0, 0.125]], &Device::Cpu).unwrap(),
        );
        tensors.insert("b".to_owned(), Tensor::new(&[7f32], &Device::Cpu).unwrap());
        Checkpoint {
            header: CheckpointHeader {
                phase: Phase::Pretrain,
                config: TrainConfig::default(),
                config_hash: "x".into(),
                step: 3,
                optimizer_step: 3,
                rngs: [("sampling".to_owned(), RngState::capture(&rng))].into(),
                concepts: vec!["red circle".into()],
                merges: None,
            },
            tensors,
        }
    }

    #[test]
    fn roundtrip_and_rng_restore() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(
            back.tensors["a.weight"].to_vec2::<f32>().unwrap(),
            ck.tensors["a.weight"].to_vec2::<f32>().unwrap()
        );
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        a.next_u64();
        let mut b = back.header.rngs["sampling"].restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        sample().save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Corrupt { .. })));
    }
}

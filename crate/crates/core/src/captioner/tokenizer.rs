//! Byte-level BPE tokenizer.
//!
//! Files:
//! - `vocab.txt`: one token per line in id order. Special tokens are written
//!   verbatim (`<bos>`, `<eos>`, `<pad>`); every other line is the token's
//!   bytes in lowercase hex.
//! - `merges.txt`: one merge per line in rank order, `left_id right_id`; the
//!   merged token takes the next free id.
//!
//! Text is pre-split before each space so that a word and its leading space
//! form one piece; merges never cross pieces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<pad>"];
const BYTE_BASE: u32 = SPECIALS.len() as u32;

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    /// Bytes of each non-special token; empty for specials.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

fn pieces(text: &str) -> Vec<&[u8]> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..b.len() {
        if b[i] == b' ' {
            out.push(&b[start..i]);
            start = i;
        }
    }
    if start < b.len() {
        out.push(&b[start..]);
    }
    out
}

impl Tokenizer {
    /// Byte-only tokenizer with no merges.
    pub fn bytes_only() -> Self {
        let mut tokens = vec![Vec::new(); SPECIALS.len()];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut t = Self::bytes_only();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = t.tokens.len() as u32;
            if a >= n || b >= n || a < BYTE_BASE || b < BYTE_BASE {
                return Err(Error::TokenOutOfRange { id: a.max(b), vocab: n as usize });
            }
            let mut bytes = t.tokens[a as usize].clone();
            bytes.extend_from_slice(&t.tokens[b as usize]);
            t.tokens.push(bytes);
            t.ranks.insert((a, b), rank as u32);
        }
        t.merges = merges;
        Ok(t)
    }

    /// Learns merges from `corpus` until the vocabulary reaches
    /// `vocab_size` or no pair occurs at least twice. Ties go to the pair
    /// with the smallest ids.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let mut words: HashMap<Vec<u32>, usize> = HashMap::new();
        for line in corpus {
            for p in pieces(line.as_ref()) {
                let ids = p.iter().map(|&b| b as u32 + BYTE_BASE).collect();
                *words.entry(ids).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = words.into_iter().collect();
        words.sort();
        let mut merges = Vec::new();
        let mut next = BYTE_BASE + 256;
        while (next as usize) < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for pair in w.windows(2) {
                    *counts.entry((pair[0], pair[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            for (w, _) in &mut words {
                *w = merge_pair(w, pair, next);
            }
            merges.push(pair);
            next += 1;
        }
        Self::from_merges(merges)
    }

    /// Rebuilds a tokenizer from its merge list in rank order.
    pub fn from_merge_list(merges: Vec<(u32, u32)>) -> Result<Self> {
        Self::from_merges(merges)
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pieces(text) {
            let mut ids: Vec<u32> = p.iter().map(|&b| b as u32 + BYTE_BASE).collect();
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                ids = merge_pair(&ids, pair, BYTE_BASE + 256 + rank);
            }
            out.extend(ids);
        }
        out
    }

    /// Concatenated bytes of the non-special tokens, decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.tokens.len(),
            })?;
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut vocab = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i < SPECIALS.len() {
                vocab.push_str(SPECIALS[i]);
            } else {
                for b in t {
                    write!(vocab, "{b:02x}").expect("writing to a String");
                }
            }
            vocab.push('\n');
        }
        fs::write(dir.join("vocab.txt"), vocab)?;
        let merges: String = self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
        fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let merges_path = dir.join("merges.txt");
        let corrupt = |path: &Path, reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut merges = Vec::new();
        for (n, line) in fs::read_to_string(&merges_path)?.lines().enumerate() {
            let parsed = line
                .split_once(' ')
                .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)));
            merges.push(parsed.ok_or_else(|| corrupt(&merges_path, format!("line {}: {line:?}", n + 1)))?);
        }
        let tok = Self::from_merges(merges)?;
        let vocab_path = dir.join("vocab.txt");
        let text = fs::read_to_string(&vocab_path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != tok.tokens.len() {
            return Err(corrupt(
                &vocab_path,
                format!("{} entries, merges imply {}", lines.len(), tok.tokens.len()),
            ));
        }
        for (i, line) in lines.iter().enumerate() {
            let expected = if i < SPECIALS.len() {
                SPECIALS[i].to_owned()
            } else {
                tok.tokens[i].iter().map(|b| format!("{b:02x}")).collect()
            };
            if *line != expected {
                return Err(corrupt(&vocab_path, format!("entry {i} is {line:?}, expected {expected:?}")));
            }
        }
        Ok(tok)
    }
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

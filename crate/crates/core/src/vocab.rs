//! Concept vocabulary construction and scaled concept projection weights.
//!
//! The vocabulary is the lowercased union of every supplied name list with
//! `+s`/`+es` plurals dropped whenever the singular is present. Each concept
//! is then embedded through a prompt template by the teacher text tower,
//! normalized and scaled by [`CONCEPT_SCALE`]. Two templates are used:
//! a short one for the student-side (source) projection and a descriptive
//! one for the teacher-side (target) projection.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOURCE_TEMPLATE: &str = "a {}";
pub const TARGET_TEMPLATE: &str = "a photo of a {}.";
pub const CONCEPT_SCALE: f32 = 100.0;

const WEIGHTS_MAGIC: &[u8; 8] = b"TAPCW001";

/// Deterministic text tower producing unit-norm embeddings.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    concepts: Vec<String>,
}

impl ConceptVocabulary {
    /// Wraps an already-clean list, checking the vocabulary invariants.
    pub fn from_sorted(concepts: Vec<String>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let set: BTreeSet<&str> = concepts.iter().map(String::as_str).collect();
        for w in concepts.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(format!(
                    "vocabulary not strictly sorted at {:?}",
                    w[1]
                )));
            }
        }
        for c in &concepts {
            if c.to_lowercase() != *c {
                return Err(Error::InvalidConfig(format!("concept {c:?} is not lowercase")));
            }
            if set.contains(format!("{c}s").as_str()) || set.contains(format!("{c}es").as_str()) {
                return Err(Error::InvalidConfig(format!("plural of {c:?} present")));
            }
        }
        Ok(Self { concepts })
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts
            .binary_search_by(|c| c.as_str().cmp(concept))
            .ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.concepts.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_sorted(
            text.lines()
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect(),
        )
    }
}

/// Merge name lists into a deduplicated, plural-free, sorted vocabulary.
pub fn merge_and_dedup<S: AsRef<str>>(name_lists: &[Vec<S>]) -> Result<ConceptVocabulary> {
    let mut concepts = BTreeSet::new();
    for list in name_lists {
        for name in list {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(Error::InvalidConfig("empty concept name".into()));
            }
            concepts.insert(name.to_lowercase());
        }
    }
    if concepts.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let plurals: BTreeSet<String> = concepts
        .iter()
        .flat_map(|s| [format!("{s}s"), format!("{s}es")])
        .filter(|p| concepts.contains(p))
        .collect();
    Ok(ConceptVocabulary {
        concepts: concepts.difference(&plurals).cloned().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightVariant {
    Source,
    Target,
}

impl WeightVariant {
    pub fn template(self) -> &'static str {
        match self {
            Self::Source => SOURCE_TEMPLATE,
            Self::Target => TARGET_TEMPLATE,
        }
    }

    fn code(self) -> u8 {
        match self {
            Self::Source => 0,
            Self::Target => 1,
        }
    }
}

pub fn apply_template(template: &str, concept: &str) -> String {
    template.replacen("{}", concept, 1)
}

/// `dim × k` projection, stored column-major: one scaled column per concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWeightMatrix {
    dim: usize,
    columns: Vec<f32>,
    variant: WeightVariant,
}

impl ConceptWeightMatrix {
    pub fn from_columns(dim: usize, columns: Vec<Vec<f32>>, variant: WeightVariant) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut flat = Vec::with_capacity(dim * columns.len());
        for c in &columns {
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.len(),
                });
            }
            flat.extend_from_slice(c);
        }
        Ok(Self {
            dim,
            columns: flat,
            variant,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_concepts(&self) -> usize {
        self.columns.len() / self.dim
    }

    pub fn variant(&self) -> WeightVariant {
        self.variant
    }

    pub fn column(&self, k: usize) -> &[f32] {
        &self.columns[k * self.dim..(k + 1) * self.dim]
    }

    /// Logits `e · W` for an embedding of matching dimension.
    pub fn logits(&self, embedding: &[f32]) -> Result<Vec<f32>> {
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        Ok((0..self.num_concepts())
            .map(|k| {
                self.column(k)
                    .iter()
                    .zip(embedding)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// The matrix as a `(dim, k)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let k = self.num_concepts();
        Ok(Tensor::from_slice(&self.columns, (k, self.dim), device)?.t()?.contiguous()?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_concepts() as u32).to_le_bytes())?;
        w.write_all(&[self.variant.code(), 0, 0, 0])?;
        for v in &self.columns {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: "<weights>".into(),
            reason: reason.into(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let variant = match b4[0] {
            0 => WeightVariant::Source,
            1 => WeightVariant::Target,
            _ => return Err(corrupt("unknown variant")),
        };
        if dim == 0 || k == 0 {
            return Err(corrupt("empty matrix"));
        }
        let mut buf = vec![0u8; dim * k * 4];
        r.read_exact(&mut buf)?;
        let columns = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dim,
            columns,
            variant,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn scaled_unit(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    let s = if norm > 0.0 {
        CONCEPT_SCALE as f64 / norm
    } else {
        0.0
    };
    for x in &mut v {
        *x = (*x as f64 * s) as f32;
    }
    v
}

pub fn build_concept_weights(
    vocab: &ConceptVocabulary,
    encoder: &impl TextEncoder,
    variant: WeightVariant,
) -> Result<ConceptWeightMatrix> {
    weights_for_names(vocab.concepts(), encoder, variant)
}

/// Target-template weights over a caller-supplied class list, for zero-shot
/// evaluation on a dataset-specific vocabulary.
pub fn dataset_vocab_weights<S: AsRef<str>>(
    class_names: &[S],
    encoder: &impl TextEncoder,
) -> Result<ConceptWeightMatrix> {
    if class_names.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    weights_for_names(class_names, encoder, WeightVariant::Target)
}

fn weights_for_names<S: AsRef<str>>(
    names: &[S],
    encoder: &impl TextEncoder,
    variant: WeightVariant,
) -> Result<ConceptWeightMatrix> {
    let columns = names
        .iter()
        .map(|c| {
            let e = encoder.encode_text(&apply_template(variant.template(), c.as_ref()))?;
            Ok(scaled_unit(e))
        })
        .collect::<Result<Vec<_>>>()?;
    ConceptWeightMatrix::from_columns(encoder.dim(), columns, variant)
}

/// A vocabulary with both projection matrices, stored as
/// `concepts.txt`, `weights-source.bin` and `weights-target.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabBundle {
    pub vocab: ConceptVocabulary,
    pub source: ConceptWeightMatrix,
    pub target: ConceptWeightMatrix,
}

impl VocabBundle {
    pub fn build(vocab: ConceptVocabulary, encoder: &impl TextEncoder) -> Result<Self> {
        Ok(Self {
            source: build_concept_weights(&vocab, encoder, WeightVariant::Source)?,
            target: build_concept_weights(&vocab, encoder, WeightVariant::Target)?,
            vocab,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("concepts.txt"))?;
        self.source.save(&dir.join("weights-source.bin"))?;
        self.target.save(&dir.join("weights-target.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = ConceptVocabulary::load(&dir.join("concepts.txt"))?;
        let source = ConceptWeightMatrix::load(&dir.join("weights-source.bin"))?;
        let target = ConceptWeightMatrix::load(&dir.join("weights-target.bin"))?;
        for w in [&source, &target] {
            if w.num_concepts() != vocab.len() {
                return Err(Error::DimensionMismatch {
                    expected: vocab.len(),
                    got: w.num_concepts(),
                });
            }
        }
        Ok(Self { vocab, source, target })
    }
}

//! Sparse prompt encoder: random-Fourier positional encoding of each point
//! plus a learned embedding of its label. There is no dense mask input.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::Scope;
use crate::sampler::PromptSet;

/// Label table rows: the four point labels, then padding.
pub const NUM_LABEL_ROWS: usize = 5;
pub const PAD_ROW: usize = 4;

pub struct PromptEncoder {
    /// `(2, dim/2)` Gaussian frequencies.
    gaussian: Tensor,
    labels: Tensor,
    dim: usize,
}

/// Encoded prompts of a batch, padded to the longest set.
pub struct PromptBatch {
    /// `(P, N, dim)`.
    pub embeddings: Tensor,
    /// `(P, N)` with 1 for real points.
    pub valid: Vec<Vec<bool>>,
}

impl PromptEncoder {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!("prompt dim {dim} must be even")));
        }
        Ok(Self {
            gaussian: s.gaussian_buffer("pe_gaussian", &[2, dim / 2], 1.0)?,
            labels: s.normal("label_embed", &[NUM_LABEL_ROWS, dim], 1.0)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[sin, cos](2π·(2c − 1)·G)` for `(n, 2)` coordinates in `[0, 1]`.
    pub fn positional(&self, coords: &Tensor) -> Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let proj = (c.matmul(&self.gaussian)? * std::f64::consts::TAU)?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// Positional encoding of every cell center of a `g×g` grid, row-major.
    pub fn dense_pe(&self, g: usize) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f32 + 0.5) / g as f32);
                coords.push((y as f32 + 0.5) / g as f32);
            }
        }
        self.positional(&Tensor::from_vec(coords, (g * g, 2), self.device())?)
    }

    fn device(&self) -> &Device {
        self.gaussian.device()
    }

    /// Encodes one set into `(n, dim)`.
    pub fn encode(&self, prompts: &PromptSet) -> Result<Tensor> {
        let batch = self.encode_batch(std::slice::from_ref(prompts))?;
        Ok(batch.embeddings.squeeze(0)?)
    }

    pub fn encode_batch(&self, sets: &[PromptSet]) -> Result<PromptBatch> {
        let n = sets.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut coords = Vec::with_capacity(sets.len() * n * 2);
        let mut rows = Vec::with_capacity(sets.len() * n);
        let mut pe_keep = Vec::with_capacity(sets.len() * n);
        let mut valid = Vec::with_capacity(sets.len());
        for set in sets {
            let mut v = vec![false; n];
            for (i, p) in set.points.iter().enumerate() {
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                    return Err(Error::InvalidPrompt(format!(
                        "coordinate ({}, {}) outside [0, 1]",
                        p.x, p.y
                    )));
                }
                coords.extend([p.x, p.y]);
                rows.push(p.label.index() as u32);
                pe_keep.push(1f32);
                v[i] = true;
            }
            for _ in set.len()..n {
                coords.extend([0.5, 0.5]);
                rows.push(PAD_ROW as u32);
                pe_keep.push(0.0);
            }
            valid.push(v);
        }
        let p = sets.len();
        let dev = self.device();
        let coords = Tensor::from_vec(coords, (p * n, 2), dev)?;
        let pe = self
            .positional(&coords)?
            .broadcast_mul(&Tensor::from_vec(pe_keep, (p * n, 1), dev)?)?;
        let labels = self
            .labels
            .index_select(&Tensor::from_vec(rows, p * n, dev)?, 0)?;
        let embeddings = (pe + labels)?.reshape((p, n, self.dim))?;
        Ok(PromptBatch { embeddings, valid })
    }
}

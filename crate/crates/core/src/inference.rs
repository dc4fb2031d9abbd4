//! Segment, recognize and caption with a trained checkpoint.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::RgbImage;

use crate::captioner::select_generation;
use crate::error::{Error, Result};
use crate::network::decoder::bilinear_matrix;
use crate::network::{rank_concepts, route, TokenBundle};
use crate::nn::Ctx;
use crate::raster::Mask;
use crate::sampler::PromptSet;
use crate::teacher::softmax;
use crate::trainer::LoadedModel;

/// One prompt's result at the caller's image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub mask: Mask,
    pub slot: usize,
    pub iou_pred: [f32; 4],
    /// `(concept index, probability)`, most probable first.
    pub concepts: Vec<(usize, f32)>,
    pub caption: Option<String>,
    pub semantic_token: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    pub topk: usize,
    pub caption: bool,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { topk: 5, caption: false }
    }
}

/// Bilinear resize of a `side × side` logit map to `width × height`.
pub fn resize_map(logits: &[f32], side: usize, width: usize, height: usize) -> Vec<f32> {
    let ry = bilinear_matrix(side, height);
    let rx = bilinear_matrix(side, width);
    let mut rows = vec![0f32; height * side];
    for y in 0..height {
        for (k, &w) in ry[y * side..(y + 1) * side].iter().enumerate() {
            if w != 0.0 {
                for x in 0..side {
                    rows[y * side + x] += w * logits[k * side + x];
                }
            }
        }
    }
    let mut out = vec![0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let row = &rows[y * side..(y + 1) * side];
            let wx = &rx[x * side..(x + 1) * side];
            out[y * width + x] = row.iter().zip(wx).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Routed mask thresholded at probability one half.
pub fn routed_mask(bundle: &TokenBundle, slot: usize, width: usize, height: usize) -> Result<Mask> {
    let full = resize_map(&bundle.mask_logits[slot], bundle.mask_side, width, height);
    Mask::from_bits(width, height, full.iter().map(|&v| v > 0.0).collect())
}

/// Frozen model shared by evaluation, the CLI and the HTTP service.
pub struct TapModel {
    pub inner: LoadedModel,
}

impl TapModel {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: LoadedModel::load(path)?,
        })
    }

    pub fn image_size(&self) -> usize {
        self.inner.region.config.image_size
    }

    pub fn concepts(&self) -> &[String] {
        &self.inner.concepts
    }

    pub fn has_captioner(&self) -> bool {
        self.inner.caption.is_some()
    }

    /// Encoder grid `(1, g², C)` for an image, resized to the model input.
    pub fn encode(&self, image: &RgbImage) -> Result<Tensor> {
        let size = self.image_size() as u32;
        let resized;
        let input = if image.dimensions() == (size, size) {
            image
        } else {
            resized = image::imageops::resize(image, size, size, image::imageops::FilterType::Triangle);
            &resized
        };
        self.inner.region.encode_images(&[input], &mut Ctx::eval())
    }

    /// Concept logits of one semantic token against `(D, K)` weights.
    pub fn concept_logits(&self, token: &[f32], weights: &Tensor) -> Result<Vec<f32>> {
        let t = Tensor::from_slice(token, (1, token.len()), &Device::Cpu)?;
        let logits = self.inner.region.semantic_head.concept_logits(&t, weights)?;
        Ok(logits.squeeze(0)?.to_vec1::<f32>()?)
    }

    /// Top-k concept indices of a token under dataset-specific weights.
    pub fn classify_zero_shot(&self, token: &[f32], weights: &Tensor, topk: usize) -> Result<Vec<usize>> {
        Ok(rank_concepts(&self.concept_logits(token, weights)?, topk))
    }

    /// Greedy captions for a batch of semantic tokens.
    pub fn captions(&self, tokens: &[Vec<f32>]) -> Result<Vec<String>> {
        let (model, tok) = self
            .inner
            .caption
            .as_ref()
            .ok_or_else(|| Error::NotFound("caption model".into()))?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let dim = tokens[0].len();
        let flat: Vec<f32> = tokens.iter().flat_map(|t| t.iter().copied()).collect();
        let sem = Tensor::from_vec(flat, (tokens.len(), dim), &Device::Cpu)?;
        model.generate(&sem)?.iter().map(|ids| tok.decode(ids)).collect()
    }

    /// Decodes prompts against an encoded grid; masks come back at
    /// `width × height`.
    pub fn segment(
        &self,
        grid: &Tensor,
        prompts: &[PromptSet],
        width: usize,
        height: usize,
        opts: SegmentOptions,
    ) -> Result<Vec<Segment>> {
        let bundles = self.inner.region.predict_on_grid(grid, prompts)?;
        let mut out = Vec::with_capacity(bundles.len());
        for (p, b) in prompts.iter().zip(&bundles) {
            let slot = route(p.kind, &b.iou_pred);
            let token = select_generation(&b.semantic_tokens, p.kind, &b.iou_pred)?;
            let probs = softmax(&self.concept_logits(&token, &self.inner.source_weights)?);
            let concepts = rank_concepts(&probs, opts.topk).into_iter().map(|i| (i, probs[i])).collect();
            out.push(Segment {
                mask: routed_mask(b, slot, width, height)?,
                slot,
                iou_pred: b.iou_pred,
                concepts,
                caption: None,
                semantic_token: token,
            });
        }
        if opts.caption && !out.is_empty() {
            let tokens: Vec<Vec<f32>> = out.iter().map(|s| s.semantic_token.clone()).collect();
            for (s, c) in out.iter_mut().zip(self.captions(&tokens)?) {
                s.caption = Some(c);
            }
        }
        Ok(out)
    }
}

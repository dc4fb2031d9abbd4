//! Promptable region model: image encoder, prompt encoder and the two-way
//! decoder that emits mask, semantic and IoU tokens.

pub mod audit;
pub mod decoder;
pub mod encoder;
pub mod prompt;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp, ParamStore, Scope};
use crate::raster::RgbImage;
use crate::sampler::{PromptKind, PromptSet};

pub use decoder::{DecoderOutput, MaskDecoder, NUM_OUTPUT_TOKENS, NUM_SLOTS};
pub use encoder::ImageEncoder;
pub use prompt::PromptEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub mlp_ratio: f64,
    pub cross_window_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_mlp_dim: usize,
    pub attention_downsample: usize,
    pub semantic_hidden: usize,
    pub text_dim: usize,
    pub num_concepts: usize,
    pub drop_path: f64,
    pub decoder_dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// CPU-trainable configuration for 128-pixel shapes-world images.
    pub fn desk() -> Self {
        Self {
            image_size: 128,
            patch_size: 8,
            window_size: 4,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            mlp_ratio: 4.0,
            cross_window_blocks: 2,
            decoder_dim: 128,
            decoder_heads: 8,
            decoder_depth: 2,
            decoder_mlp_dim: 512,
            attention_downsample: 2,
            semantic_hidden: 256,
            text_dim: 64,
            num_concepts: 12,
            drop_path: 0.1,
            decoder_dropout: 0.1,
        }
    }

    /// Full-scale geometry: 1024-pixel input, 64×64 embedding grid.
    pub fn full() -> Self {
        Self {
            image_size: 1024,
            patch_size: 16,
            window_size: 16,
            encoder_dim: 1024,
            encoder_depth: 24,
            encoder_heads: 16,
            mlp_ratio: 4.0,
            cross_window_blocks: 4,
            decoder_dim: 256,
            decoder_heads: 8,
            decoder_depth: 2,
            decoder_mlp_dim: 2048,
            attention_downsample: 2,
            semantic_hidden: 1024,
            text_dim: 1024,
            num_concepts: 2560,
            drop_path: 0.4,
            decoder_dropout: 0.1,
        }
    }

    /// Small geometry for unit tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            window_size: 2,
            encoder_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            mlp_ratio: 2.0,
            cross_window_blocks: 2,
            decoder_dim: 32,
            decoder_heads: 4,
            decoder_depth: 2,
            decoder_mlp_dim: 64,
            attention_downsample: 2,
            semantic_hidden: 32,
            text_dim: 16,
            num_concepts: 5,
            drop_path: 0.0,
            decoder_dropout: 0.0,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Side of the decoder's mask logits before resizing.
    pub fn low_res_side(&self) -> usize {
        4 * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.window_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.grid_size() % self.window_size != 0 {
            return bad(format!(
                "grid {} not divisible by window {}",
                self.grid_size(),
                self.window_size
            ));
        }
        if self.encoder_heads == 0 || self.encoder_dim % self.encoder_heads != 0 {
            return bad("encoder_dim must be divisible by encoder_heads".into());
        }
        if self.encoder_dim % 2 != 0 {
            return bad("encoder_dim must be even".into());
        }
        if self.decoder_dim % 8 != 0 || self.decoder_heads == 0 {
            return bad("decoder_dim must be a multiple of 8".into());
        }
        let inner = self.decoder_dim / self.attention_downsample.max(1);
        if self.attention_downsample == 0
            || self.decoder_dim % self.attention_downsample != 0
            || inner % self.decoder_heads != 0
            || self.decoder_dim % self.decoder_heads != 0
        {
            return bad("decoder attention widths must divide evenly into heads".into());
        }
        if self.cross_window_blocks > self.encoder_depth || self.decoder_depth == 0 {
            return bad("need decoder_depth ≥ 1 and at most one bottleneck per block".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) || !(0.0..1.0).contains(&self.decoder_dropout) {
            return bad("drop rates must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Inference result for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    pub mask_tokens: Vec<Vec<f32>>,
    pub semantic_tokens: Vec<Vec<f32>>,
    pub iou_token: Vec<f32>,
    /// Four `side × side` row-major logit maps at decoder resolution.
    pub mask_logits: Vec<Vec<f32>>,
    pub mask_side: usize,
    pub iou_pred: [f32; NUM_SLOTS],
}

impl TokenBundle {
    pub fn num_output_tokens(&self) -> usize {
        self.mask_tokens.len() + self.semantic_tokens.len() + 1
    }
}

/// Slot selection: boxes always use slot 0; point and sketch prompts take
/// the highest predicted IoU among slots 1–3, lowest index on ties.
pub fn route(kind: PromptKind, iou_pred: &[f32]) -> usize {
    match kind {
        PromptKind::Box => 0,
        PromptKind::Points | PromptKind::Sketch => {
            let mut best = 1;
            for i in 2..NUM_SLOTS.min(iou_pred.len()) {
                if iou_pred[i] > iou_pred[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Concept indices sorted by descending logit (index breaks ties), cut to
/// `topk` (clamped to the number of concepts).
pub fn rank_concepts(logits: &[f32], topk: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(topk.min(logits.len()));
    order
}

/// Semantic token → visual embedding in the teacher's text space.
pub struct SemanticHead {
    mlp: Mlp,
    token_dim: usize,
}

impl SemanticHead {
    pub fn new(s: &Scope, cfg: &NetworkConfig) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(
                s,
                &[cfg.decoder_dim, cfg.semantic_hidden, cfg.semantic_hidden, cfg.text_dim],
                true,
            )?,
            token_dim: cfg.decoder_dim,
        })
    }

    pub fn embed(&self, tokens: &Tensor) -> Result<Tensor> {
        let got = tokens.dims().last().copied().unwrap_or(0);
        if got != self.token_dim {
            return Err(Error::DimensionMismatch {
                expected: self.token_dim,
                got,
            });
        }
        self.mlp.forward(tokens)
    }

    /// `(…, C_dec)` tokens and `(D_text, K)` weights → `(…, K)` logits.
    pub fn concept_logits(&self, tokens: &Tensor, w_src: &Tensor) -> Result<Tensor> {
        let emb = self.embed(tokens)?;
        let d = w_src.dim(0)?;
        let got = emb.dims().last().copied().unwrap_or(0);
        if d != got {
            return Err(Error::DimensionMismatch { expected: got, got: d });
        }
        let mut dims = emb.dims().to_vec();
        let rows = emb.elem_count() / d;
        let logits = emb.reshape((rows, d))?.matmul(w_src)?;
        *dims.last_mut().unwrap() = w_src.dim(1)?;
        Ok(logits.reshape(dims)?)
    }
}

pub struct RegionModel {
    pub config: NetworkConfig,
    pub encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub decoder: MaskDecoder,
    pub semantic_head: SemanticHead,
}

/// Parameter-name prefixes of the image path (frozen when captioning).
pub const IMAGE_PATH_PREFIXES: [&str; 4] = ["image_encoder.", "prompt_encoder.", "mask_decoder.", "semantic_head."];

impl RegionModel {
    pub fn new(store: &ParamStore, config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let root = store.root();
        Ok(Self {
            encoder: ImageEncoder::new(&root.pp("image_encoder"), &config)?,
            prompt_encoder: PromptEncoder::new(&root.pp("prompt_encoder"), config.decoder_dim)?,
            decoder: MaskDecoder::new(&root.pp("mask_decoder"), &config)?,
            semantic_head: SemanticHead::new(&root.pp("semantic_head"), &config)?,
            config,
        })
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }

    /// `(B, g², C_dec)` image embeddings.
    pub fn encode_images(&self, images: &[&RgbImage], ctx: &mut Ctx) -> Result<Tensor> {
        self.encoder.forward(images, ctx)
    }

    /// Decodes prompt `i` against image `image_index[i]` of `grid`.
    pub fn decode(
        &self,
        grid: &Tensor,
        image_index: &[usize],
        prompts: &[PromptSet],
        ctx: &mut Ctx,
    ) -> Result<DecoderOutput> {
        if image_index.len() != prompts.len() || prompts.is_empty() {
            return Err(Error::InvalidPrompt(format!(
                "{} prompt sets for {} image indices",
                prompts.len(),
                image_index.len()
            )));
        }
        let b = grid.dim(0)?;
        if let Some(&i) = image_index.iter().find(|&&i| i >= b) {
            return Err(Error::InvalidPrompt(format!("image index {i} out of {b}")));
        }
        for p in prompts {
            if p.is_empty() {
                return Err(Error::InvalidPrompt("empty prompt set".into()));
            }
        }
        let idx: Vec<u32> = image_index.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, image_index.len(), grid.device())?;
        let per_prompt = grid.index_select(&idx, 0)?;
        let batch = self.prompt_encoder.encode_batch(prompts)?;
        let pe = self.prompt_encoder.dense_pe(self.config.grid_size())?;
        self.decoder
            .forward(&per_prompt, &pe, &batch.embeddings, &batch.valid, ctx)
    }

    /// Inference on one image with several prompts.
    pub fn predict(&self, image: &RgbImage, prompts: &[PromptSet]) -> Result<Vec<TokenBundle>> {
        let mut ctx = Ctx::eval();
        let grid = self.encode_images(&[image], &mut ctx)?;
        self.predict_on_grid(&grid, prompts)
    }

    /// Inference against a precomputed `(1, g², C)` grid.
    pub fn predict_on_grid(&self, grid: &Tensor, prompts: &[PromptSet]) -> Result<Vec<TokenBundle>> {
        let out = self.decode(grid, &vec![0; prompts.len()], prompts, &mut Ctx::eval())?;
        bundles(&out)
    }
}

/// Splits a decoder batch into per-prompt bundles.
pub fn bundles(out: &DecoderOutput) -> Result<Vec<TokenBundle>> {
    let p = out.iou_pred.dim(0)?;
    let side = out.mask_logits.dim(2)?;
    let masks = out.mask_logits.reshape((p, NUM_SLOTS, side * side))?.to_vec3::<f32>()?;
    let mask_tokens = out.mask_tokens.to_vec3::<f32>()?;
    let semantic_tokens = out.semantic_tokens.to_vec3::<f32>()?;
    let iou_tokens = out.iou_token.to_vec2::<f32>()?;
    let iou = out.iou_pred.to_vec2::<f32>()?;
    Ok((0..p)
        .map(|i| TokenBundle {
            mask_tokens: mask_tokens[i].clone(),
            semantic_tokens: semantic_tokens[i].clone(),
            iou_token: iou_tokens[i].clone(),
            mask_logits: masks[i].clone(),
            mask_side: side,
            iou_pred: [iou[i][0], iou[i][1], iou[i][2], iou[i][3]],
        })
        .collect())
}

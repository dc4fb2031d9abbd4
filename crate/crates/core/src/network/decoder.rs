//! Two-way attention decoder: output tokens and prompt embeddings attend to
//! the image grid and the grid attends back, followed by mask, IoU and
//! semantic heads.

use candle_core::Tensor;

use super::NetworkConfig;
use crate::error::Result;
use crate::nn::{self, Ctx, LayerNorm, Linear, Mlp, Scope};

/// Number of mask slots (and of semantic slots).
pub const NUM_SLOTS: usize = 4;
/// IoU token, 4 mask tokens, 4 semantic tokens.
pub const NUM_OUTPUT_TOKENS: usize = 1 + 2 * NUM_SLOTS;

const MASKED: f64 = -1e9;

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(s: &Scope, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: Linear::new(&s.pp("q_proj"), dim, inner)?,
            k: Linear::new(&s.pp("k_proj"), dim, inner)?,
            v: Linear::new(&s.pp("v_proj"), dim, inner)?,
            out: Linear::new(&s.pp("out_proj"), inner, dim)?,
            heads,
        })
    }

    /// `bias` is `(P, 1, 1, keys)` or absent.
    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = nn::split_heads(&self.q.forward(q)?, self.heads)?;
        let k = nn::split_heads(&self.k.forward(k)?, self.heads)?;
        let v = nn::split_heads(&self.v.forward(v)?, self.heads)?;
        let o = nn::attention(&q, &k, &v, bias)?;
        self.out.forward(&nn::merge_heads(&o)?)
    }
}

struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    token_to_image: Attention,
    norm2: LayerNorm,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
    norm3: LayerNorm,
    image_to_token: Attention,
    norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(s: &Scope, cfg: &NetworkConfig, skip_first_pe: bool) -> Result<Self> {
        let d = cfg.decoder_dim;
        let h = cfg.decoder_heads;
        let ds = cfg.attention_downsample;
        Ok(Self {
            self_attn: Attention::new(&s.pp("self_attn"), d, h, 1)?,
            norm1: LayerNorm::new(&s.pp("norm1"), d)?,
            token_to_image: Attention::new(&s.pp("cross_token_to_image"), d, h, ds)?,
            norm2: LayerNorm::new(&s.pp("norm2"), d)?,
            mlp_fc1: Linear::new(&s.pp("mlp.fc1"), d, cfg.decoder_mlp_dim)?,
            mlp_fc2: Linear::new(&s.pp("mlp.fc2"), cfg.decoder_mlp_dim, d)?,
            norm3: LayerNorm::new(&s.pp("norm3"), d)?,
            image_to_token: Attention::new(&s.pp("cross_image_to_token"), d, h, ds)?,
            norm4: LayerNorm::new(&s.pp("norm4"), d)?,
            skip_first_pe,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        token_bias: &Tensor,
        dropout: f64,
        ctx: &mut Ctx,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries, Some(token_bias))?
        } else {
            let q = (queries + query_pe)?;
            let a = self.self_attn.forward(&q, &q, queries, Some(token_bias))?;
            (queries + ctx.dropout(&a, dropout)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let a = self.token_to_image.forward(&q, &k, keys, None)?;
        let queries = self.norm2.forward(&(queries + ctx.dropout(&a, dropout)?)?)?;

        let m = self.mlp_fc2.forward(&self.mlp_fc1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(queries + ctx.dropout(&m, dropout)?)?)?;

        let q = (&queries + query_pe)?;
        let a = self.image_to_token.forward(&k, &q, &queries, Some(token_bias))?;
        let keys = self.norm4.forward(&(keys + ctx.dropout(&a, dropout)?)?)?;
        Ok((queries, keys))
    }
}

/// Raw decoder outputs for a batch of `P` prompts.
pub struct DecoderOutput {
    /// `(P, 4, 4g, 4g)` low-resolution mask logits.
    pub mask_logits: Tensor,
    /// `(P, 4)`.
    pub iou_pred: Tensor,
    /// `(P, 4, C_dec)`.
    pub mask_tokens: Tensor,
    /// `(P, 4, C_dec)`.
    pub semantic_tokens: Tensor,
    /// `(P, C_dec)`.
    pub iou_token: Tensor,
}

pub struct MaskDecoder {
    output_tokens: Tensor,
    layers: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscale1: Linear,
    upscale_norm: LayerNorm,
    upscale2: Linear,
    hypernets: Vec<Mlp>,
    iou_head: Mlp,
    dim: usize,
    dropout: f64,
}

impl MaskDecoder {
    pub fn new(s: &Scope, cfg: &NetworkConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let layers = (0..cfg.decoder_depth)
            .map(|i| TwoWayBlock::new(&s.pp(format!("layers.{i}")), cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let hypernets = (0..NUM_SLOTS)
            .map(|i| Mlp::new(&s.pp(format!("hypernet.{i}")), &[d, d, d, d / 8], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            output_tokens: s.normal("output_tokens", &[NUM_OUTPUT_TOKENS, d], 1.0)?,
            layers,
            final_attn: Attention::new(&s.pp("final_attn"), d, cfg.decoder_heads, cfg.attention_downsample)?,
            norm_final: LayerNorm::new(&s.pp("norm_final"), d)?,
            upscale1: Linear::new(&s.pp("upscale1"), d, 4 * (d / 4))?,
            upscale_norm: LayerNorm::new(&s.pp("upscale_norm"), d / 4)?,
            upscale2: Linear::new(&s.pp("upscale2"), d / 4, 4 * (d / 8))?,
            hypernets,
            iou_head: Mlp::new(&s.pp("iou_head"), &[d, d, d, NUM_SLOTS], true)?,
            dim: d,
            dropout: cfg.decoder_dropout,
        })
    }

    /// `grid`: `(P, g², C)` image features per prompt; `dense_pe`: `(g², C)`;
    /// `prompts`: `(P, N, C)` with `valid` marking real points.
    pub fn forward(
        &self,
        grid: &Tensor,
        dense_pe: &Tensor,
        prompts: &Tensor,
        valid: &[Vec<bool>],
        ctx: &mut Ctx,
    ) -> Result<DecoderOutput> {
        let (p, gg, _) = grid.dims3()?;
        let g = (gg as f64).sqrt().round() as usize;
        let n = prompts.dim(1)?;
        let out = self
            .output_tokens
            .unsqueeze(0)?
            .broadcast_as((p, NUM_OUTPUT_TOKENS, self.dim))?;
        let tokens = Tensor::cat(&[&out, prompts], 1)?;
        let t = NUM_OUTPUT_TOKENS + n;
        let mut bias = Vec::with_capacity(p * t);
        for v in valid {
            bias.extend(std::iter::repeat(0f32).take(NUM_OUTPUT_TOKENS));
            bias.extend(v.iter().map(|&ok| if ok { 0.0 } else { MASKED as f32 }));
        }
        let token_bias = Tensor::from_vec(bias, (p, 1, 1, t), grid.device())?;
        let key_pe = dense_pe.unsqueeze(0)?;

        let mut queries = tokens.clone();
        let mut keys = grid.clone();
        for layer in &self.layers {
            (queries, keys) =
                layer.forward(&queries, &keys, &tokens, &key_pe, &token_bias, self.dropout, ctx)?;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let a = self.final_attn.forward(&q, &k, &keys, None)?;
        let queries = self.norm_final.forward(&(queries + ctx.dropout(&a, self.dropout)?)?)?;

        let iou_token = queries.narrow(1, 0, 1)?.squeeze(1)?;
        let mask_tokens = queries.narrow(1, 1, NUM_SLOTS)?;
        let semantic_tokens = queries.narrow(1, 1 + NUM_SLOTS, NUM_SLOTS)?;

        let up = self.upscale(&keys.reshape((p, g, g, self.dim))?)?;
        let up_side = up.dim(1)?;
        let c8 = up.dim(3)?;
        let hyper = (0..NUM_SLOTS)
            .map(|i| self.hypernets[i].forward(&mask_tokens.narrow(1, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let hyper = Tensor::cat(&hyper, 1)?;
        let feats = up.reshape((p, up_side * up_side, c8))?.transpose(1, 2)?.contiguous()?;
        let mask_logits = hyper.matmul(&feats)?.reshape((p, NUM_SLOTS, up_side, up_side))?;
        let iou_pred = self.iou_head.forward(&iou_token)?;
        Ok(DecoderOutput {
            mask_logits,
            iou_pred,
            mask_tokens,
            semantic_tokens,
            iou_token,
        })
    }

    /// Two stride-2 transposed 2×2 convolutions: `(P, g, g, C)` →
    /// `(P, 4g, 4g, C/8)`.
    fn upscale(&self, x: &Tensor) -> Result<Tensor> {
        let h = pixel_shuffle2(&self.upscale1.forward(x)?)?;
        let h = self.upscale_norm.forward(&h)?.gelu()?;
        Ok(pixel_shuffle2(&self.upscale2.forward(&h)?)?.gelu()?)
    }
}

/// `(P, h, w, 4c)` with channels ordered `(dy, dx, c)` → `(P, 2h, 2w, c)`.
pub fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let (p, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape((p, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((p, 2 * h, 2 * w, c))?)
}

/// Bilinear resize weights (half-pixel centers, edge clamped) as a
/// `(dst, src)` matrix.
pub fn bilinear_matrix(src: usize, dst: usize) -> Vec<f32> {
    let mut m = vec![0f32; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(src - 1);
        let x1 = (x0 + 1).min(src - 1);
        let t = x - x0 as f64;
        m[i * src + x0] += (1.0 - t) as f32;
        m[i * src + x1] += t as f32;
    }
    m
}

/// Resizes `(…, s, s)` logits to `(…, d, d)` as `R · X · Rᵀ`.
pub fn resize_logits(x: &Tensor, dst: usize) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let src = dims[dims.len() - 1];
    if src == dst {
        return Ok(x.clone());
    }
    let r = Tensor::from_vec(bilinear_matrix(src, dst), (dst, src), x.device())?;
    let lead: usize = dims[..dims.len() - 2].iter().product();
    let flat = x.reshape((lead, src, src))?;
    let rb = r.unsqueeze(0)?.broadcast_as((lead, dst, src))?.contiguous()?;
    let rt = r.t()?.unsqueeze(0)?.broadcast_as((lead, src, dst))?.contiguous()?;
    let out = rb.matmul(&flat)?.matmul(&rt)?;
    let mut out_dims = dims;
    let k = out_dims.len();
    out_dims[k - 2] = dst;
    out_dims[k - 1] = dst;
    Ok(out.reshape(out_dims)?)
}

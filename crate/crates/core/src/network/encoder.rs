//! Windowed ViT image encoder with relative position bias and cross-window
//! bottleneck convolutions.

use candle_core::Tensor;

use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, LayerNorm, Linear, Scope};
use crate::raster::RgbImage;

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

/// Packs images into `(batch, grid², 3·patch²)` normalized patch rows.
/// Within a patch the layout is channel-major, then row, then column.
pub fn images_to_patches(
    images: &[&RgbImage],
    patch: usize,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidConfig("empty image batch".into()));
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    if w != h || w % patch != 0 {
        return Err(Error::InvalidConfig(format!(
            "image {w}x{h} is not square or not divisible by patch {patch}"
        )));
    }
    let g = w / patch;
    let row = 3 * patch * patch;
    let mut data = Vec::with_capacity(images.len() * g * g * row);
    for img in images {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::InvalidConfig("mixed image sizes in batch".into()));
        }
        let raw = img.as_raw();
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for py in 0..patch {
                        let y = gy * patch + py;
                        for px in 0..patch {
                            let x = gx * patch + px;
                            let v = raw[(y * w + x) * 3 + c] as f32 / 255.0;
                            data.push((v - PIXEL_MEAN) / PIXEL_STD);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), g * g, row), device)?)
}

/// `(w², w²)` indices into the `(2w−1)²` relative-offset bias table.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

/// `(b, g, g, c)` → `(b·(g/w)², w², c)`.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, g, _, c) = x.dims4()?;
    let n = g / window;
    Ok(x.reshape((b, n, window, n, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * n * n, window * window, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_unpartition(x: &Tensor, window: usize, batch: usize, grid: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    let n = grid / window;
    Ok(x.reshape((batch, n, n, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((batch, grid, grid, c))?)
}

pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
}

impl WindowAttention {
    fn new(s: &Scope, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        let idx = relative_position_index(window);
        Ok(Self {
            qkv: Linear::new(&s.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&s.pp("proj"), dim, dim)?,
            bias_table: s.normal("relative_position_bias_table", &[span * span, heads], 0.02)?,
            bias_index: Tensor::from_vec(idx, window.pow(4), s.device())?,
            heads,
            window,
        })
    }

    /// `(heads, w², w²)` additive bias.
    fn bias(&self) -> Result<Tensor> {
        let n = self.window * self.window;
        Ok(self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?)
    }

    /// Attention within each window of `(windows, w², c)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let bias = self.bias()?.unsqueeze(0)?;
        let out = nn::attention(&q, &k, &v, Some(&bias))?;
        self.proj.forward(&nn::merge_heads(&out)?)
    }
}

struct WindowBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    drop_path: f64,
    window: usize,
}

impl WindowBlock {
    fn new(s: &Scope, cfg: &NetworkConfig, drop_path: f64) -> Result<Self> {
        let dim = cfg.encoder_dim;
        let hidden = (dim as f64 * cfg.mlp_ratio) as usize;
        Ok(Self {
            norm1: LayerNorm::new(&s.pp("norm1"), dim)?,
            attn: WindowAttention::new(&s.pp("attn"), dim, cfg.encoder_heads, cfg.window_size)?,
            norm2: LayerNorm::new(&s.pp("norm2"), dim)?,
            fc1: Linear::new(&s.pp("mlp.fc1"), dim, hidden)?,
            fc2: Linear::new(&s.pp("mlp.fc2"), hidden, dim)?,
            drop_path,
            window: cfg.window_size,
        })
    }

    /// `x`: `(b, g, g, c)`.
    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, g, _, _) = x.dims4()?;
        let h = window_partition(&self.norm1.forward(x)?, self.window)?;
        let h = self.attn.forward(&h)?;
        let h = window_unpartition(&h, self.window, b, g)?;
        let x = (x + ctx.drop_path(&h, self.drop_path)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((&x + ctx.drop_path(&h, self.drop_path)?)?)
    }
}

/// Residual bottleneck: 1×1 reduce, 3×3, 1×1 expand, each followed by a
/// layer norm; the final norm starts at zero so the block begins as identity.
struct Bottleneck {
    reduce: Linear,
    norm1: LayerNorm,
    conv: Tensor,
    norm2: LayerNorm,
    expand: Linear,
    norm3: LayerNorm,
}

impl Bottleneck {
    fn new(s: &Scope, dim: usize) -> Result<Self> {
        let mid = dim / 2;
        let fan_in = (mid * 9) as f64;
        Ok(Self {
            reduce: Linear::no_bias(&s.pp("conv1"), dim, mid)?,
            norm1: LayerNorm::new(&s.pp("norm1"), mid)?,
            conv: s.pp("conv2").uniform("weight", &[mid, mid, 3, 3], 1.0 / fan_in.sqrt())?,
            norm2: LayerNorm::new(&s.pp("norm2"), mid)?,
            expand: Linear::no_bias(&s.pp("conv3"), mid, dim)?,
            norm3: LayerNorm::with_weight(&s.pp("norm3"), dim, 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.reduce.forward(x)?)?.gelu()?;
        let nchw = h.permute((0, 3, 1, 2))?.contiguous()?;
        let conv = nchw.conv2d(&self.conv, 1, 1, 1, 1)?;
        let h = conv.permute((0, 2, 3, 1))?.contiguous()?;
        let h = self.norm2.forward(&h)?.gelu()?;
        let h = self.norm3.forward(&self.expand.forward(&h)?)?;
        Ok((x + h)?)
    }
}

pub struct ImageEncoder {
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: Vec<WindowBlock>,
    /// Bottleneck applied after block index `.0`.
    bottlenecks: Vec<(usize, Bottleneck)>,
    neck: Linear,
    neck_norm: LayerNorm,
    patch: usize,
    grid: usize,
}

/// Block indices after which the cross-window bottlenecks sit: evenly spaced
/// through the depth, the last one after the final block.
pub fn bottleneck_positions(depth: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| ((i + 1) * depth / count).max(1) - 1).collect()
}

impl ImageEncoder {
    pub fn new(s: &Scope, cfg: &NetworkConfig) -> Result<Self> {
        let g = cfg.grid_size();
        let dim = cfg.encoder_dim;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| {
                let rate = if cfg.encoder_depth > 1 {
                    cfg.drop_path * i as f64 / (cfg.encoder_depth - 1) as f64
                } else {
                    0.0
                };
                WindowBlock::new(&s.pp(format!("blocks.{i}")), cfg, rate)
            })
            .collect::<Result<Vec<_>>>()?;
        let bottlenecks = bottleneck_positions(cfg.encoder_depth, cfg.cross_window_blocks)
            .into_iter()
            .enumerate()
            .map(|(i, after)| Ok((after, Bottleneck::new(&s.pp(format!("cross.{i}")), dim)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::new(&s.pp("patch_embed"), 3 * cfg.patch_size * cfg.patch_size, dim)?,
            pos_embed: s.normal("pos_embed", &[g * g, dim], 0.02)?,
            blocks,
            bottlenecks,
            neck: Linear::new(&s.pp("neck"), dim, cfg.decoder_dim)?,
            neck_norm: LayerNorm::new(&s.pp("neck_norm"), cfg.decoder_dim)?,
            patch: cfg.patch_size,
            grid: g,
        })
    }

    /// Images → `(batch, grid², decoder_dim)` embedding grid.
    pub fn forward(&self, images: &[&RgbImage], ctx: &mut Ctx) -> Result<Tensor> {
        let patches = images_to_patches(images, self.patch, self.pos_embed.device())?;
        if patches.dim(1)? != self.grid * self.grid {
            return Err(Error::InvalidConfig(format!(
                "image produces {} patches, model expects {}",
                patches.dim(1)?,
                self.grid * self.grid
            )));
        }
        self.forward_patches(&patches, ctx)
    }

    pub fn forward_patches(&self, patches: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let b = patches.dim(0)?;
        let g = self.grid;
        let x = self.patch_embed.forward(patches)?.broadcast_add(&self.pos_embed)?;
        let mut x = x.reshape((b, g, g, ()))?;
        let mut next = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, ctx)?;
            while next < self.bottlenecks.len() && self.bottlenecks[next].0 == i {
                x = self.bottlenecks[next].1.forward(&x)?;
                next += 1;
            }
        }
        let x = self.neck_norm.forward(&self.neck.forward(&x)?)?;
        Ok(x.reshape((b, g * g, ()))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, IndexOp};

    #[test]
    fn bottlenecks_evenly_spaced() {
        assert_eq!(bottleneck_positions(6, 4), [0, 2, 3, 5]);
        assert_eq!(bottleneck_positions(12, 4), [2, 5, 8, 11]);
        assert_eq!(bottleneck_positions(4, 4), [0, 1, 2, 3]);
    }

    #[test]
    fn relative_index_symmetry() {
        let idx = relative_position_index(2);
        // token 0 vs itself → center of the 3x3 table
        assert_eq!(idx[0], 4);
        // (0,0) vs (1,1): dy = dx = -1 → entry 0; reverse → 8
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
    }

    #[test]
    fn partition_roundtrip() {
        let x = Tensor::arange(0f32, 2. * 8. * 8. * 3., &Device::Cpu)
            .unwrap()
            .reshape((2, 8, 8, 3))
            .unwrap();
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.dims(), &[8, 16, 3]);
        // first window, second token = pixel (0, 1) of image 0
        assert_eq!(
            w.i((0, 1)).unwrap().to_vec1::<f32>().unwrap(),
            x.i((0, 0, 1)).unwrap().to_vec1::<f32>().unwrap()
        );
        let back = window_unpartition(&w, 4, 2, 8).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn window_attention_is_local() {
        // Permuting windows before attention and undoing it after is identity.
        let store = ParamStore::new(1, Device::Cpu);
        let attn = WindowAttention::new(&store.root(), 8, 2, 2).unwrap();
        let x = Tensor::randn(0f32, 1., (6, 4, 8), &Device::Cpu).unwrap();
        let y = attn.forward(&x).unwrap();
        let perm = Tensor::new(&[3u32, 5, 0, 1, 4, 2], &Device::Cpu).unwrap();
        let inv = Tensor::new(&[2u32, 3, 5, 0, 4, 1], &Device::Cpu).unwrap();
        let yp = attn
            .forward(&x.index_select(&perm, 0).unwrap())
            .unwrap()
            .index_select(&inv, 0)
            .unwrap();
        let d = (y - yp).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn desk_grid_shape() {
        let cfg = NetworkConfig::tiny();
        let store = ParamStore::new(2, Device::Cpu);
        let enc = ImageEncoder::new(&store.root(), &cfg).unwrap();
        let img = RgbImage::new(cfg.image_size as u32, cfg.image_size as u32);
        let out = enc.forward(&[&img, &img], &mut Ctx::eval()).unwrap();
        let g = cfg.grid_size();
        assert_eq!(out.dims(), &[2, g * g, cfg.decoder_dim]);
        assert_eq!(out.dtype(), DType::F32);
    }
}

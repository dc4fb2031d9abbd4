//! Region captioning: a linear projection of the semantic token followed by
//! a causal rotary-position text decoder.
//!
//! Sequence layout: position 0 holds the projected semantic token, position
//! 1 the `<bos>` embedding and positions `2..` the caption tokens. Logits at
//! position `i ≥ 1` predict the token at `i + 1`; the final caption target is
//! `<eos>`.

pub mod tokenizer;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::route;
use crate::nn::{self, Ctx, LayerNorm, Linear, ParamStore, Scope};
use crate::sampler::PromptKind;

pub use tokenizer::{Tokenizer, BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionConfig {
    /// Width of the semantic token fed to the projector.
    pub token_dim: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub rope_base: f64,
}

impl CaptionConfig {
    pub fn desk(token_dim: usize, vocab_size: usize) -> Self {
        Self {
            token_dim,
            dim: 128,
            layers: 4,
            heads: 4,
            ffn_mult: 4,
            vocab_size,
            max_tokens: 40,
            dropout: 0.3,
            rope_base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 || (self.dim / self.heads) % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "caption dim {} must split into {} heads of even width",
                self.dim, self.heads
            )));
        }
        if self.vocab_size <= EOS as usize || self.max_tokens == 0 {
            return Err(Error::InvalidConfig("caption vocabulary or length too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("caption dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Rotates consecutive pairs `(x₂ᵢ, x₂ᵢ₊₁)` of a single vector by
/// `position · base^(−2i/d)`.
pub fn apply_rotary(x: &[f32], position: usize, base: f64) -> Result<Vec<f32>> {
    let d = x.len();
    if d % 2 != 0 {
        return Err(Error::InvalidConfig(format!("rotary width {d} is odd")));
    }
    let mut out = vec![0f32; d];
    for i in 0..d / 2 {
        let theta = base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (position as f64 * theta).sin_cos();
        let (a, b) = (x[2 * i] as f64, x[2 * i + 1] as f64);
        out[2 * i] = (a * c - b * s) as f32;
        out[2 * i + 1] = (a * s + b * c) as f32;
    }
    Ok(out)
}

/// `(len, d/2)` cos and sin tables for positions `start..start+len`.
fn rotary_tables(start: usize, len: usize, d: usize, base: f64, dev: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let mut cos = Vec::with_capacity(len * d / 2);
    let mut sin = Vec::with_capacity(len * d / 2);
    for p in start..start + len {
        for i in 0..d / 2 {
            let theta = base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (p as f64 * theta).sin_cos();
            cos.push(c as f32);
            sin.push(s as f32);
        }
    }
    Ok((
        Tensor::from_vec(cos, (len, d / 2), dev)?,
        Tensor::from_vec(sin, (len, d / 2), dev)?,
    ))
}

/// Rotary embedding of `(b, h, len, d)` with `(len, d/2)` tables.
fn rotate(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = x.dims4()?;
    let pairs = x.reshape((b, h, n, d / 2, 2))?;
    let a = pairs.narrow(4, 0, 1)?.squeeze(4)?;
    let c = pairs.narrow(4, 1, 1)?.squeeze(4)?;
    let ra = (a.broadcast_mul(cos)? - c.broadcast_mul(sin)?)?;
    let rc = (a.broadcast_mul(sin)? + c.broadcast_mul(cos)?)?;
    Ok(Tensor::stack(&[ra, rc], 4)?.reshape((b, h, n, d))?)
}

struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Per-layer keys and values of the consumed positions, `(b, h, len, d)`.
pub struct KvCache {
    layers: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self {
            layers: vec![None; layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct CaptionModel {
    pub config: CaptionConfig,
    projector: Linear,
    embed: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    lm_head: Linear,
}

/// Parameter-name prefix of the caption path.
pub const CAPTION_PREFIX: &str = "captioner.";

impl CaptionModel {
    pub fn new(store: &ParamStore, config: CaptionConfig) -> Result<Self> {
        config.validate()?;
        let s = store.root().pp("captioner");
        Self::build(&s, config)
    }

    fn build(s: &Scope, config: CaptionConfig) -> Result<Self> {
        let d = config.dim;
        let blocks = (0..config.layers)
            .map(|i| {
                let b = s.pp(format!("layers.{i}"));
                Ok(Block {
                    norm1: LayerNorm::new(&b.pp("norm1"), d)?,
                    qkv: Linear::new(&b.pp("qkv"), d, 3 * d)?,
                    out: Linear::new(&b.pp("out"), d, d)?,
                    norm2: LayerNorm::new(&b.pp("norm2"), d)?,
                    fc1: Linear::new(&b.pp("fc1"), d, config.ffn_mult * d)?,
                    fc2: Linear::new(&b.pp("fc2"), config.ffn_mult * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projector: Linear::new(&s.pp("projector"), config.token_dim, d)?,
            embed: s.normal("embed", &[config.vocab_size, d], 0.02)?,
            blocks,
            final_norm: LayerNorm::new(&s.pp("final_norm"), d)?,
            lm_head: Linear::zeros(&s.pp("lm_head"), d, config.vocab_size)?,
            config,
        })
    }

    /// Semantic tokens `(…, C_dec)` → text-space vectors `(…, D_txt)`.
    pub fn project(&self, semantic: &Tensor) -> Result<Tensor> {
        let got = semantic.dims().last().copied().unwrap_or(0);
        if got != self.config.token_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.token_dim,
                got,
            });
        }
        self.projector.forward(semantic)
    }

    fn embed_tokens(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let b = ids.len();
        let n = ids[0].len();
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        if let Some(&bad) = flat.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let idx = Tensor::from_vec(flat, b * n, self.embed.device())?;
        Ok(self.embed.index_select(&idx, 0)?.reshape((b, n, self.config.dim))?)
    }

    /// Runs `(b, n, dim)` inputs starting at absolute position `start`,
    /// extending `cache` when given. Returns `(b, n, V)` logits.
    fn run(&self, x: &Tensor, start: usize, mut cache: Option<&mut KvCache>, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let h = self.config.heads;
        let hd = self.config.head_dim();
        let (cos, sin) = rotary_tables(start, n, hd, self.config.rope_base, x.device())?;
        let total = start + n;
        let mut mask = Vec::with_capacity(n * total);
        for i in 0..n {
            for j in 0..total {
                mask.push(if j <= start + i { 0f32 } else { f32::NEG_INFINITY });
            }
        }
        let mask = Tensor::from_vec(mask, (1, 1, n, total), x.device())?;
        let p = self.config.dropout;
        let mut x = x.clone();
        for (li, blk) in self.blocks.iter().enumerate() {
            let hn = blk.norm1.forward(&x)?;
            let qkv = blk.qkv.forward(&hn)?.reshape((b, n, 3, h, hd))?.permute((2, 0, 3, 1, 4))?;
            let q = rotate(&qkv.get(0)?.contiguous()?, &cos, &sin)?;
            let mut k = rotate(&qkv.get(1)?.contiguous()?, &cos, &sin)?;
            let mut v = qkv.get(2)?.contiguous()?;
            if let Some(c) = cache.as_deref_mut() {
                if let Some((pk, pv)) = &c.layers[li] {
                    k = Tensor::cat(&[pk, &k], 2)?;
                    v = Tensor::cat(&[pv, &v], 2)?;
                }
                c.layers[li] = Some((k.clone(), v.clone()));
            }
            let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?.broadcast_add(&mask)?;
            let probs = ctx.dropout(&nn::softmax(&scores)?, p)?;
            let attn = blk.out.forward(&nn::merge_heads(&probs.matmul(&v)?)?)?;
            x = (x + ctx.dropout(&attn, p)?)?;
            let f = blk.fc2.forward(&blk.fc1.forward(&blk.norm2.forward(&x)?)?.gelu()?)?;
            x = (x + ctx.dropout(&f, p)?)?;
        }
        if let Some(c) = cache {
            c.len = total;
        }
        self.lm_head.forward(&self.final_norm.forward(&x)?)
    }

    /// Input sequence `[SEM][BOS] t₁…tₙ` for each caption, right-padded to
    /// the longest. Returns `(b, n_max + 2, V)` logits.
    pub fn forward_train(&self, semantic: &Tensor, captions: &[Vec<u32>], ctx: &mut Ctx) -> Result<Tensor> {
        let b = semantic.dim(0)?;
        if captions.len() != b || b == 0 {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: captions.len(),
            });
        }
        let longest = captions.iter().map(Vec::len).max().unwrap_or(0);
        if longest > self.config.max_tokens {
            return Err(Error::Overlength {
                len: longest,
                limit: self.config.max_tokens,
            });
        }
        let ids: Vec<Vec<u32>> = captions
            .iter()
            .map(|c| {
                let mut v = Vec::with_capacity(longest + 1);
                v.push(BOS);
                v.extend_from_slice(c);
                v.resize(longest + 1, PAD);
                v
            })
            .collect();
        let sem = self.project(semantic)?.unsqueeze(1)?;
        let x = Tensor::cat(&[&sem, &self.embed_tokens(&ids)?], 1)?;
        self.run(&x, 0, None, ctx)
    }

    /// Positions `1..=n+1` of each sequence with targets `t₁…tₙ <eos>`,
    /// flattened to `(Σ(n+1), V)` logits and a target list.
    pub fn caption_targets(logits: &Tensor, captions: &[Vec<u32>]) -> Result<(Tensor, Vec<u32>)> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let (_, seq, _) = logits.dims3()?;
        for (i, c) in captions.iter().enumerate() {
            for (j, &t) in c.iter().chain(std::iter::once(&EOS)).enumerate() {
                rows.push((i * seq + 1 + j) as u32);
                targets.push(t);
            }
        }
        let v = logits.dim(2)?;
        let flat = logits.reshape(((), v))?;
        let idx = Tensor::from_vec(rows, targets.len(), logits.device())?;
        Ok((flat.index_select(&idx, 0)?, targets))
    }

    /// Greedy decoding with a key/value cache for a batch of semantic
    /// tokens `(b, C_dec)`. Each output stops before `<eos>` or after
    /// `max_tokens` tokens.
    pub fn generate(&self, semantic: &Tensor) -> Result<Vec<Vec<u32>>> {
        let b = semantic.dim(0)?;
        let mut ctx = Ctx::eval();
        let mut cache = KvCache::new(self.blocks.len());
        let sem = self.project(semantic)?.unsqueeze(1)?;
        let bos = self.embed_tokens(&vec![vec![BOS]; b])?;
        let x = Tensor::cat(&[&sem, &bos], 1)?;
        let mut logits = self.run(&x, 0, Some(&mut cache), &mut ctx)?.narrow(1, 1, 1)?;
        let mut out = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for _ in 0..self.config.max_tokens {
            let next: Vec<u32> = logits.squeeze(1)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for i in 0..b {
                if !done[i] {
                    if next[i] == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(next[i]);
                    }
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            let start = cache.len();
            let x = self.embed_tokens(&next.iter().map(|&t| vec![t]).collect::<Vec<_>>())?;
            logits = self.run(&x, start, Some(&mut cache), &mut ctx)?;
        }
        Ok(out)
    }

    /// Greedy decoding that recomputes the whole prefix every step.
    pub fn generate_uncached(&self, semantic: &Tensor) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for _ in 0..self.config.max_tokens {
            let logits = self.forward_train(semantic, std::slice::from_ref(&out), &mut Ctx::eval())?;
            let last = logits.get(0)?.get(out.len() + 1)?;
            let next = last.argmax(0)?.to_scalar::<u32>()?;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Logits for the next token of every step of cached generation, for
    /// comparing against the uncached path.
    pub fn cached_step_logits(&self, semantic: &Tensor, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        let mut ctx = Ctx::eval();
        let mut cache = KvCache::new(self.blocks.len());
        let sem = self.project(semantic)?.unsqueeze(1)?;
        let x = Tensor::cat(&[&sem, &self.embed_tokens(&[vec![BOS]])?], 1)?;
        let mut steps = vec![self.run(&x, 0, Some(&mut cache), &mut ctx)?.get(0)?.get(1)?.to_vec1::<f32>()?];
        for &t in tokens {
            let start = cache.len();
            let l = self.run(&self.embed_tokens(&[vec![t]])?, start, Some(&mut cache), &mut ctx)?;
            steps.push(l.get(0)?.get(0)?.to_vec1::<f32>()?);
        }
        Ok(steps)
    }
}

/// Caption from the candidate at the routed slot.
pub fn select_generation<T: Clone>(candidates: &[T], kind: PromptKind, iou_pred: &[f32]) -> Result<T> {
    if candidates.len() != crate::network::NUM_SLOTS {
        return Err(Error::DimensionMismatch {
            expected: crate::network::NUM_SLOTS,
            got: candidates.len(),
        });
    }
    Ok(candidates[route(kind, iou_pred)].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> CaptionConfig {
        CaptionConfig {
            token_dim: 8,
            dim: 16,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
            vocab_size: 11,
            max_tokens: 40,
            dropout: 0.0,
            rope_base: 10000.0,
        }
    }

    /// Randomizes every parameter so greedy decoding is not degenerate.
    fn random_model(seed: u64) -> (ParamStore, CaptionModel) {
        let store = ParamStore::new(seed, Device::Cpu);
        let model = CaptionModel::new(&store, small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, v) in store.vars() {
            let data: Vec<f32> = (0..v.elem_count()).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
            store
                .assign(&name, &Tensor::from_vec(data, v.shape(), &Device::Cpu).unwrap())
                .unwrap();
        }
        (store, model)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn rotary_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(apply_rotary(&q, 0, 1e4).unwrap(), q);
        let r = apply_rotary(&q, 17, 1e4).unwrap();
        assert!((dot(&r, &r).sqrt() - dot(&q, &q).sqrt()).abs() < 1e-5);
        for _ in 0..50 {
            let (m, n, s) = (rng.gen_range(0..50), rng.gen_range(0..50), rng.gen_range(0..200));
            let a = dot(&apply_rotary(&q, m, 1e4).unwrap(), &apply_rotary(&k, n, 1e4).unwrap());
            let b = dot(&apply_rotary(&q, m + s, 1e4).unwrap(), &apply_rotary(&k, n + s, 1e4).unwrap());
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!(apply_rotary(&[1.0, 2.0, 3.0], 1, 1e4).is_err());
    }

    #[test]
    fn tensor_rotary_matches_vector_form() {
        let x: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = Tensor::from_vec(x.clone(), (1, 1, 3, 8), &Device::Cpu).unwrap();
        let (c, s) = rotary_tables(5, 3, 8, 1e4, &Device::Cpu).unwrap();
        let r = rotate(&t, &c, &s).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for p in 0..3 {
            let want = apply_rotary(&x[p * 8..(p + 1) * 8], 5 + p, 1e4).unwrap();
            for i in 0..8 {
                assert!((r[p * 8 + i] - want[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn projector_is_affine() {
        let (_s, m) = random_model(1);
        let a = Tensor::randn(0f32, 1., (1, 8), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f32, 1., (1, 8), &Device::Cpu).unwrap();
        let z = Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap();
        let f = |t: &Tensor| m.project(t).unwrap();
        let e = (((f(&(&a + &b).unwrap()) - f(&a)).unwrap() - f(&b)).unwrap() + f(&z)).unwrap();
        assert!(e.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() < 1e-5);
        assert_eq!(f(&z).dims(), &[1, 16]);
    }

    #[test]
    fn causal_and_shaped() {
        let (_s, m) = random_model(2);
        let sem = Tensor::randn(0f32, 1., (1, 8), &Device::Cpu).unwrap();
        let a = m.forward_train(&sem, &[vec![3, 4, 5, 6]], &mut Ctx::eval()).unwrap();
        let b = m.forward_train(&sem, &[vec![3, 4, 9, 2]], &mut Ctx::eval()).unwrap();
        assert_eq!(a.dims(), &[1, 6, 11]);
        // positions 0..=3 see at most [SEM, BOS, 3, 4]
        let pa = a.narrow(1, 0, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pb = b.narrow(1, 0, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(pa, pb);
        let long = vec![3u32; 41];
        assert!(matches!(
            m.forward_train(&sem, &[long], &mut Ctx::eval()),
            Err(Error::Overlength { len: 41, limit: 40 })
        ));
    }

    #[test]
    fn uniform_logits_at_init() {
        let store = ParamStore::new(3, Device::Cpu);
        let m = CaptionModel::new(&store, small_config()).unwrap();
        let sem = Tensor::randn(0f32, 1., (1, 8), &Device::Cpu).unwrap();
        let logits = m.forward_train(&sem, &[vec![3, 4]], &mut Ctx::eval()).unwrap();
        let (rows, targets) = CaptionModel::caption_targets(&logits, &[vec![3, 4]]).unwrap();
        assert_eq!(targets, vec![3, 4, EOS]);
        let ce = crate::losses::caption_ce(&rows, &targets).unwrap().to_scalar::<f32>().unwrap();
        assert!((ce as f64 - 11f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn cached_generation_matches_uncached_oracle() {
        for seed in 0..100 {
            let (_s, m) = random_model(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let sem_data: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sem = Tensor::from_vec(sem_data, (1, 8), &Device::Cpu).unwrap();
            let cached = m.generate(&sem).unwrap().remove(0);
            let oracle = m.generate_uncached(&sem).unwrap();
            assert_eq!(cached, oracle, "seed {seed}");
            assert!(cached.len() <= 40);
            let steps = m.cached_step_logits(&sem, &cached).unwrap();
            let full = m.forward_train(&sem, &[cached.clone()], &mut Ctx::eval()).unwrap();
            for (i, s) in steps.iter().enumerate() {
                let f = full.get(0).unwrap().get(i + 1).unwrap().to_vec1::<f32>().unwrap();
                for (a, b) in s.iter().zip(&f) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batch_generation_matches_single() {
        let (_s, m) = random_model(7);
        let sem = Tensor::randn(0f32, 1., (3, 8), &Device::Cpu).unwrap();
        let batch = m.generate(&sem).unwrap();
        for i in 0..3 {
            let one = m.generate(&sem.narrow(0, i, 1).unwrap()).unwrap().remove(0);
            assert_eq!(batch[i], one);
        }
    }

    #[test]
    fn selection_follows_routing() {
        let c = ["a", "b", "c", "d"];
        assert_eq!(select_generation(&c, PromptKind::Box, &[0.0, 1.0, 1.0, 1.0]).unwrap(), "a");
        assert_eq!(select_generation(&c, PromptKind::Points, &[0.0, 0.2, 0.9, 0.1]).unwrap(), "c");
        let same = ["x"; 4];
        assert_eq!(select_generation(&same, PromptKind::Sketch, &[0.3, 0.1, 0.2, 0.9]).unwrap(), "x");
    }
}

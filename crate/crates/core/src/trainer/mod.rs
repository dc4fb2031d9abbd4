//! Pre-training (joint segmentation and concept distillation with two-stage
//! prompt sampling) and caption fine-tuning on a frozen image path.

pub mod checkpoint;
pub mod optim;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{CaptionConfig, CaptionModel, Tokenizer, CAPTION_PREFIX};
use crate::datastore::{Dataset, EmbeddingStore, ImageRecord, Region};
use crate::error::{Error, Result};
use crate::inference::resize_map;
use crate::losses::{
    caption_ce, concept_kl, dice_loss, focal_loss, iou_mse, mask_total, FocalParams, KlDirection, LossBreakdown,
    LossWeights,
};
use crate::network::decoder::resize_logits;
use crate::network::{route, NetworkConfig, RegionModel, IMAGE_PATH_PREFIXES, NUM_SLOTS};
use crate::nn::{Ctx, ParamStore};
use crate::raster::Mask;
use crate::sampler::{box_prompt, sample_stage1, sample_stage2, PromptKind, PromptSet};
use crate::teacher::{softmax, TeacherImageEmbedding};
use crate::vocab::{ConceptWeightMatrix, VocabBundle};

use checkpoint::{Checkpoint, CheckpointHeader, Phase, RngState};
use optim::{AdamW, AdamWParams};

/// Flat training configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub embeddings_dir: PathBuf,
    pub vocab_dir: PathBuf,
    /// Checkpoint written during and after training.
    pub out: PathBuf,
    /// Line-delimited JSON metrics.
    pub metrics: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub batch_images: usize,
    pub prompt_cap: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the semantic head, whose outputs meet
    /// weight columns of norm 100.
    pub semantic_lr_scale: f64,
    pub w_mask: f64,
    pub w_iou: f64,
    pub w_concept: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub kl_direction: KlDirection,
    /// Supervise the lowest-loss slot of all four instead of the routed one.
    pub min_over_slots: bool,
    /// Distill every semantic token instead of the supervised slot only.
    pub concept_all_slots: bool,
    /// Mask losses at input resolution instead of decoder resolution.
    pub full_res_mask_loss: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub resume: bool,
    #[serde(flatten)]
    pub network: NetworkConfig,
    pub caption_dim: usize,
    pub caption_layers: usize,
    pub caption_heads: usize,
    pub caption_vocab_size: usize,
    pub caption_max_tokens: usize,
    pub caption_dropout: f64,
    pub caption_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: "data/train".into(),
            embeddings_dir: "data/embeddings".into(),
            vocab_dir: "data/vocab".into(),
            out: "runs/pretrain.ckpt".into(),
            metrics: "runs/metrics.jsonl".into(),
            seed: 0,
            steps: 1000,
            batch_images: 4,
            prompt_cap: 64,
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            semantic_lr_scale: 1.0,
            w_mask: 1.0,
            w_iou: 1.0,
            w_concept: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            kl_direction: KlDirection::Forward,
            min_over_slots: false,
            concept_all_slots: false,
            full_res_mask_loss: false,
            log_every: 10,
            checkpoint_every: 200,
            resume: false,
            network: NetworkConfig::desk(),
            caption_dim: 128,
            caption_layers: 4,
            caption_heads: 4,
            caption_vocab_size: 512,
            caption_max_tokens: 40,
            caption_dropout: 0.3,
            caption_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss_weights().validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.steps == 0 || self.batch_images == 0 || self.prompt_cap < 2 || self.caption_batch == 0 {
            return bad("steps, batch sizes and prompt cap must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.semantic_lr_scale > 0.0) {
            return bad("base_lr and semantic_lr_scale must be positive");
        }
        for r in [self.beta1, self.beta2, self.weight_decay, self.caption_dropout] {
            if !(0.0..1.0).contains(&r) {
                return bad("betas, weight decay and dropout rates must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Learning-rate floor: 1% of the base rate.
    pub fn final_lr(&self) -> f64 {
        0.01 * self.base_lr
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.steps, self.base_lr, self.final_lr())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mask: self.w_mask,
            iou: self.w_iou,
            concept: self.w_concept,
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }

    pub fn adam(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn caption_config(&self, vocab_size: usize) -> CaptionConfig {
        CaptionConfig {
            token_dim: self.network.decoder_dim,
            dim: self.caption_dim,
            layers: self.caption_layers,
            heads: self.caption_heads,
            ffn_mult: 4,
            vocab_size,
            max_tokens: self.caption_max_tokens,
            dropout: self.caption_dropout,
            rope_base: 10000.0,
        }
    }

    /// SHA-256 over every field that shapes the training trajectory.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.metrics = PathBuf::new();
        c.resume = false;
        c.log_every = 0;
        c.checkpoint_every = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Cosine decay from `base` at step 0 to `final_lr` at `total`.
pub fn lr_at(step: u64, total: u64, base: f64, final_lr: f64) -> f64 {
    let t = (step.min(total) as f64) / (total.max(1) as f64);
    final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Teacher target distribution per region id.
pub type TargetTable = HashMap<String, Vec<f32>>;

/// Looks up each region's stored teacher embedding and turns it into a
/// target distribution over the vocabulary.
pub fn teacher_targets(dataset: &Dataset, store: &EmbeddingStore, target: &ConceptWeightMatrix) -> Result<TargetTable> {
    let mut out = TargetTable::with_capacity(dataset.num_regions());
    for (_, region) in dataset.regions() {
        let rec = store.read_embedding(&region.region_id).map_err(|e| match e {
            Error::NotFound(_) => Error::MissingEmbedding(region.region_id.clone()),
            other => other,
        })?;
        let logits = target.logits(&TeacherImageEmbedding(rec.to_f32()).0)?;
        out.insert(region.region_id.clone(), softmax(&logits));
    }
    Ok(out)
}

/// Image indices for each step: a fresh seeded permutation per epoch.
fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch as u64 {
        let pos = step * batch as u64 + k;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6461_7461_6f72_6472);
            rng.set_stream(epoch + 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

fn mask_tensor(gts: &[&Mask], device: &Device) -> Result<Tensor> {
    let n = gts[0].width() * gts[0].height();
    let data: Vec<f32> = gts
        .iter()
        .flat_map(|m| m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (gts.len(), 1, n), device)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Losses of one decoding pass plus the routed predictions it produced.
pub struct StageOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub routed_masks: Vec<Mask>,
}

/// Slot that receives supervision: slot 0 for boxes, otherwise the slot
/// among 1–3 whose thresholded mask best matches the ground truth (lower
/// mask loss, then lower index, on ties). With `min_over_slots` the slot of
/// lowest mask loss among all four.
pub fn supervised_slot(kind: PromptKind, actual_iou: &[f32], mask_loss: &[f32], min_over_slots: bool) -> usize {
    if min_over_slots {
        let mut best = 0;
        for i in 1..NUM_SLOTS {
            if mask_loss[i] < mask_loss[best] {
                best = i;
            }
        }
        return best;
    }
    match kind {
        PromptKind::Box => 0,
        _ => {
            let mut best = 1;
            for i in 2..NUM_SLOTS {
                let better = actual_iou[i] > actual_iou[best]
                    || (actual_iou[i] == actual_iou[best] && mask_loss[i] < mask_loss[best]);
                if better {
                    best = i;
                }
            }
            best
        }
    }
}

/// Block-majority downsample of a square mask to `side × side`: a cell is
/// foreground when at least half of its source pixels are.
pub fn downsample_mask(mask: &Mask, side: usize) -> Result<Mask> {
    let (w, h) = (mask.width(), mask.height());
    if (w, h) == (side, side) {
        return Ok(mask.clone());
    }
    if w != h || w % side != 0 {
        return Err(Error::DimensionMismatch { expected: side, got: w });
    }
    let f = w / side;
    Ok(Mask::from_fn(side, side, |x, y| {
        let mut n = 0;
        for dy in 0..f {
            for dx in 0..f {
                n += usize::from(mask.get(x * f + dx, y * f + dy));
            }
        }
        2 * n >= f * f
    }))
}

#[allow(clippy::too_many_arguments)]
pub fn stage_losses(
    model: &RegionModel,
    cfg: &TrainConfig,
    w_src: &Tensor,
    grid: &Tensor,
    image_index: &[usize],
    prompts: &[PromptSet],
    gts: &[&Mask],
    targets: &Tensor,
    ctx: &mut Ctx,
) -> Result<StageOutput> {
    let out = model.decode(grid, image_index, prompts, ctx)?;
    let size = model.config.image_size;
    let low = out.mask_logits.dim(2)?;
    let side = if cfg.full_res_mask_loss { size } else { low };
    let p = prompts.len();
    let hw = side * side;
    let scaled: Vec<Mask> = gts.iter().map(|m| downsample_mask(m, side)).collect::<Result<_>>()?;
    let scaled_refs: Vec<&Mask> = scaled.iter().collect();
    let full = resize_logits(&out.mask_logits, side)?.reshape((p, NUM_SLOTS, hw))?;
    let gt = mask_tensor(&scaled_refs, grid.device())?.broadcast_as((p, NUM_SLOTS, hw))?.contiguous()?;
    let focal = focal_loss(&full, &gt, cfg.focal())?;
    let dice = dice_loss(&full, &gt)?;
    let mask_all = mask_total(&focal, &dice)?;

    let logits = full.to_vec3::<f32>()?;
    let mask_vals = mask_all.to_vec2::<f32>()?;
    let mut actual = Vec::with_capacity(p * NUM_SLOTS);
    let mut sel = Vec::with_capacity(p);
    let mut routed_masks = Vec::with_capacity(p);
    let iou_pred = out.iou_pred.to_vec2::<f32>()?;
    for i in 0..p {
        let mut ious = [0f32; NUM_SLOTS];
        for s in 0..NUM_SLOTS {
            ious[s] = crate::losses::actual_iou(&logits[i][s], &scaled[i])? as f32;
        }
        actual.extend_from_slice(&ious);
        sel.push(supervised_slot(prompts[i].kind, &ious, &mask_vals[i], cfg.min_over_slots) as u32);
        let r = route(prompts[i].kind, &iou_pred[i]);
        let routed = if side == size {
            logits[i][r].clone()
        } else {
            resize_map(&logits[i][r], side, size, size)
        };
        routed_masks.push(Mask::from_bits(size, size, routed.iter().map(|&v| v > 0.0).collect())?);
    }
    let dev = grid.device();
    let sel_t = Tensor::from_vec(sel, (p, 1), dev)?;
    let focal_sel = focal.gather(&sel_t, 1)?.mean_all()?;
    let dice_sel = dice.gather(&sel_t, 1)?.mean_all()?;
    let mask_loss = mask_all.gather(&sel_t, 1)?.mean_all()?;
    let actual_t = Tensor::from_vec(actual, (p, NUM_SLOTS), dev)?;
    let iou_loss = iou_mse(&out.iou_pred, &actual_t)?.mean_all()?;

    let concept_logits = model.semantic_head.concept_logits(&out.semantic_tokens, w_src)?;
    let k = w_src.dim(1)?;
    let kl = if cfg.concept_all_slots {
        let t = targets.unsqueeze(1)?.broadcast_as((p, NUM_SLOTS, k))?.contiguous()?;
        concept_kl(&concept_logits, &t, cfg.kl_direction)?.mean_all()?
    } else {
        let idx = sel_t.unsqueeze(2)?.broadcast_as((p, 1, k))?.contiguous()?;
        let picked = concept_logits.gather(&idx, 1)?.squeeze(1)?;
        concept_kl(&picked, targets, cfg.kl_direction)?.mean_all()?
    };

    let w = cfg.loss_weights();
    let total = (((&mask_loss * w.mask)? + (&iou_loss * w.iou)?)? + (&kl * w.concept)?)?;
    let breakdown = LossBreakdown::new(scalar(&focal_sel)?, scalar(&dice_sel)?, scalar(&iou_loss)?, scalar(&kl)?);
    Ok(StageOutput {
        total,
        breakdown,
        routed_masks,
    })
}

fn add_breakdowns(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        focal: a.focal + b.focal,
        dice: a.dice + b.dice,
        mask_total: a.mask_total + b.mask_total,
        iou_mse: a.iou_mse + b.iou_mse,
        concept_kl: a.concept_kl + b.concept_kl,
        caption_ce: None,
    }
}

fn rows_tensor(rows: &[&Vec<f32>], device: &Device) -> Result<Tensor> {
    let k = rows[0].len();
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), k), device)?)
}

fn store_tensors(store: &ParamStore) -> BTreeMap<String, Tensor> {
    let mut out: BTreeMap<String, Tensor> = store
        .vars()
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().clone()))
        .collect();
    out.extend(store.buffers());
    out
}

fn load_store_tensors(store: &ParamStore, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let names = store.vars().into_iter().map(|(k, _)| k).chain(store.buffers().into_iter().map(|(k, _)| k));
    for name in names {
        let t = tensors.get(&name).ok_or_else(|| Error::NotFound(name.clone()))?;
        store.assign(&name, t)?;
    }
    Ok(())
}

fn is_image_path(name: &str) -> bool {
    IMAGE_PATH_PREFIXES.iter().any(|p| name.starts_with(p))
}

const SOURCE_WEIGHTS: &str = "concepts.source";
const TARGET_WEIGHTS: &str = "concepts.target";

fn weights_tensor(w: &ConceptWeightMatrix) -> Result<Tensor> {
    w.to_tensor(&Device::Cpu)
}

/// Appends one JSON object per line.
pub struct MetricsLog {
    file: Option<fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if path.as_os_str().is_empty() {
            return Ok(Self { file: None });
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        Ok(Self { file: Some(file) })
    }

    pub fn write(&mut self, value: &serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, value)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: u64,
    pub lr: f64,
    pub prompts: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub total: f64,
    pub elapsed_s: f64,
}

pub struct Pretrainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: RegionModel,
    bundle: VocabBundle,
    w_src: Tensor,
    opt: AdamW,
    sample_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    step: u64,
}

impl Pretrainer {
    pub fn new(cfg: TrainConfig, bundle: VocabBundle) -> Result<Self> {
        cfg.validate()?;
        if bundle.source.dim() != cfg.network.text_dim {
            return Err(Error::DimensionMismatch {
                expected: cfg.network.text_dim,
                got: bundle.source.dim(),
            });
        }
        let store = ParamStore::new(cfg.seed, Device::Cpu);
        let mut net = cfg.network.clone();
        net.num_concepts = bundle.vocab.len();
        let model = RegionModel::new(&store, net)?;
        let mut opt = AdamW::new(store.vars(), cfg.adam())?;
        opt.scale_lr("semantic_head.", cfg.semantic_lr_scale);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_rng.set_stream(1);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise_rng.set_stream(2);
        Ok(Self {
            w_src: weights_tensor(&bundle.source)?,
            bundle,
            cfg,
            store,
            model,
            opt,
            sample_rng,
            noise_rng,
            step: 0,
        })
    }

    /// Restores parameters, optimizer moments, generators and step count.
    pub fn resume(cfg: TrainConfig, bundle: VocabBundle, ck: &Checkpoint) -> Result<Self> {
        let expected = cfg.trajectory_hash();
        if ck.header.config_hash != expected || ck.header.phase != Phase::Pretrain {
            return Err(Error::ResumeMismatch {
                expected,
                found: ck.header.config_hash.clone(),
            });
        }
        let mut t = Self::new(cfg, bundle)?;
        load_store_tensors(&t.store, &ck.tensors)?;
        t.opt.load_state(ck.header.optimizer_step, &ck.tensors)?;
        let rng = |name: &str| {
            ck.header
                .rngs
                .get(name)
                .map(RngState::restore)
                .ok_or_else(|| Error::NotFound(format!("rng state {name}")))
        };
        t.sample_rng = rng("sampling")?;
        t.noise_rng = rng("noise")?;
        t.step = ck.header.step;
        Ok(t)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One optimizer update on the regions of `images`.
    pub fn pretrain_step(&mut self, images: &[&ImageRecord], targets: &TargetTable) -> Result<(LossBreakdown, usize)> {
        let cap = self.cfg.prompt_cap / 2;
        let mut regions: Vec<(usize, &Region)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, rec)| rec.regions.iter().map(move |r| (i, r)))
            .collect();
        regions.truncate(cap);
        if regions.is_empty() {
            return Err(Error::InvalidConfig("batch without regions".into()));
        }
        let dev = Device::Cpu;
        let target_rows = regions
            .iter()
            .map(|(_, r)| targets.get(&r.region_id).ok_or_else(|| Error::MissingEmbedding(r.region_id.clone())))
            .collect::<Result<Vec<_>>>()?;
        let imgs: Vec<_> = images.iter().map(|r| &r.image).collect();
        let mut ctx = Ctx::train(&mut self.noise_rng);
        let grid = self.model.encode_images(&imgs, &mut ctx)?;

        let stage1 = regions
            .iter()
            .map(|(_, r)| sample_stage1(&r.mask, &mut self.sample_rng))
            .collect::<Result<Vec<_>>>()?;
        let idx1: Vec<usize> = regions.iter().map(|(i, _)| *i).collect();
        let gts1: Vec<&Mask> = regions.iter().map(|(_, r)| &r.mask).collect();
        let t1 = rows_tensor(&target_rows, &dev)?;
        let s1 = stage_losses(&self.model, &self.cfg, &self.w_src, &grid, &idx1, &stage1, &gts1, &t1, &mut ctx)?;

        let mut stage2 = Vec::new();
        let mut idx2 = Vec::new();
        let mut gts2 = Vec::new();
        let mut rows2 = Vec::new();
        for (j, (i, r)) in regions.iter().enumerate() {
            let (_, p) = sample_stage2(&stage1[j], &s1.routed_masks[j], &r.mask, &mut self.sample_rng)?;
            if let Some(p) = p {
                stage2.push(p);
                idx2.push(*i);
                gts2.push(&r.mask);
                rows2.push(target_rows[j]);
            }
        }
        let mut total = s1.total;
        let mut breakdown = s1.breakdown;
        let prompts = stage1.len() + stage2.len();
        if !stage2.is_empty() {
            let t2 = rows_tensor(&rows2, &dev)?;
            let s2 = stage_losses(&self.model, &self.cfg, &self.w_src, &grid, &idx2, &stage2, &gts2, &t2, &mut ctx)?;
            total = (total + s2.total)?;
            breakdown = add_breakdowns(&breakdown, &s2.breakdown);
        }
        let grads = total.backward()?;
        self.opt.step(&grads, self.cfg.lr(self.step))?;
        self.step += 1;
        Ok((breakdown, prompts))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = store_tensors(&self.store);
        tensors.extend(self.opt.state_tensors());
        tensors.insert(SOURCE_WEIGHTS.into(), self.w_src.clone());
        tensors.insert(TARGET_WEIGHTS.into(), weights_tensor(&self.bundle.target)?);
        Ok(Checkpoint {
            header: CheckpointHeader {
                phase: Phase::Pretrain,
                config: self.cfg.clone(),
                config_hash: self.cfg.trajectory_hash(),
                step: self.step,
                optimizer_step: self.opt.step_count(),
                rngs: [
                    ("sampling".to_owned(), RngState::capture(&self.sample_rng)),
                    ("noise".to_owned(), RngState::capture(&self.noise_rng)),
                ]
                .into(),
                concepts: self.bundle.vocab.concepts().to_vec(),
                merges: None,
            },
            tensors,
        })
    }
}

/// Summary of a finished training run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub final_losses: Option<LossBreakdown>,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

fn save_due(step: u64, every: u64, total: u64) -> bool {
    step == total || (every > 0 && step % every == 0)
}

/// Full pre-training loop driven by `cfg`: data from disk, periodic
/// checkpoints and metrics, resumable when `cfg.resume` is set and the
/// checkpoint exists.
pub fn train_pretrain(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.data_dir)?;
    let store = EmbeddingStore::open(&cfg.embeddings_dir)?;
    let bundle = VocabBundle::load(&cfg.vocab_dir)?;
    let targets = teacher_targets(&dataset, &store, &bundle.target)?;
    run_pretrain(cfg, &dataset, &targets, bundle, None)
}

/// Pre-training over in-memory data. `stop_at` ends the run early (after
/// saving) for interruption tests.
pub fn run_pretrain(
    cfg: &TrainConfig,
    dataset: &Dataset,
    targets: &TargetTable,
    bundle: VocabBundle,
    stop_at: Option<u64>,
) -> Result<RunSummary> {
    let started = Instant::now();
    let resuming = cfg.resume && cfg.out.exists();
    let mut trainer = if resuming {
        Pretrainer::resume(cfg.clone(), bundle, &Checkpoint::load(&cfg.out)?)?
    } else {
        Pretrainer::new(cfg.clone(), bundle)?
    };
    let mut log = MetricsLog::open(&cfg.metrics, resuming)?;
    let n = dataset.records().len();
    let mut last = None;
    while trainer.step < cfg.steps {
        let step = trainer.step;
        let idx = batch_indices(cfg.seed, step, cfg.batch_images, n);
        let images: Vec<&ImageRecord> = idx.iter().map(|&i| &dataset.records()[i]).collect();
        let lr = cfg.lr(step);
        let (losses, prompts) = trainer.pretrain_step(&images, targets)?;
        let total = crate::losses::pretrain_total(&losses, &cfg.loss_weights())?;
        if !total.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite loss at step {step}")));
        }
        let done = trainer.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps || done == 1) {
            let rec = StepRecord {
                phase: Phase::Pretrain,
                step: done,
                lr,
                prompts,
                losses,
                total,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            log::info!("pretrain step {done}/{} total {total:.4}", cfg.steps);
            log.write(&serde_json::to_value(&rec)?)?;
        }
        last = Some(losses);
        let stop = stop_at == Some(done);
        if save_due(done, cfg.checkpoint_every, cfg.steps) || stop {
            trainer.checkpoint()?.save(&cfg.out)?;
        }
        if stop {
            break;
        }
    }
    Ok(RunSummary {
        steps: trainer.step,
        final_losses: last,
        seconds: started.elapsed().as_secs_f64(),
        checkpoint: cfg.out.clone(),
    })
}

/// Image path, optional caption path and vocabulary restored from a
/// checkpoint.
pub struct LoadedModel {
    pub store: ParamStore,
    pub region: RegionModel,
    pub caption: Option<(CaptionModel, Tokenizer)>,
    pub concepts: Vec<String>,
    /// `(D_text, K)` student-side concept weights.
    pub source_weights: Tensor,
    /// `(D_text, K)` teacher-side concept weights.
    pub target_weights: Tensor,
    pub header: CheckpointHeader,
}

impl LoadedModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header = ck.header.clone();
        let store = ParamStore::new(header.config.seed, Device::Cpu);
        let mut net = header.config.network.clone();
        net.num_concepts = header.concepts.len();
        let region = RegionModel::new(&store, net)?;
        let caption = match &header.merges {
            Some(merges) => {
                let tok = Tokenizer::from_merge_list(merges.clone())?;
                let model = CaptionModel::new(&store, header.config.caption_config(tok.vocab_size()))?;
                Some((model, tok))
            }
            None => None,
        };
        load_store_tensors(&store, &ck.tensors)?;
        let get = |n: &str| ck.tensors.get(n).cloned().ok_or_else(|| Error::NotFound(n.to_owned()));
        Ok(Self {
            source_weights: get(SOURCE_WEIGHTS)?,
            target_weights: get(TARGET_WEIGHTS)?,
            concepts: header.concepts.clone(),
            store,
            region,
            caption,
            header,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Every image-path parameter and buffer, by name.
    pub fn image_path_tensors(&self) -> BTreeMap<String, Tensor> {
        store_tensors(&self.store)
            .into_iter()
            .filter(|(k, _)| is_image_path(k))
            .collect()
    }
}

/// Semantic tokens of GT-box prompts at the box slot, one per region, in
/// dataset order.
pub fn box_semantic_tokens(model: &RegionModel, dataset: &Dataset) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::with_capacity(dataset.num_regions());
    for rec in dataset.records() {
        if rec.regions.is_empty() {
            continue;
        }
        let prompts = rec
            .regions
            .iter()
            .map(|r| box_prompt(&r.mask))
            .collect::<Result<Vec<_>>>()?;
        let bundles = model.predict(&rec.image, &prompts)?;
        for (r, b) in rec.regions.iter().zip(bundles) {
            let slot = route(PromptKind::Box, &b.iou_pred);
            out.push((r.region_id.clone(), b.semantic_tokens[slot].clone()));
        }
    }
    Ok(out)
}

pub struct Finetuner {
    pub cfg: TrainConfig,
    pub loaded: LoadedModel,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: u64,
}

impl Finetuner {
    /// Starts caption training on top of a pre-trained checkpoint with a
    /// tokenizer learned from `captions`.
    pub fn new<S: AsRef<str>>(cfg: TrainConfig, init: &Checkpoint, captions: &[S]) -> Result<Self> {
        cfg.validate()?;
        let tok = Tokenizer::train(captions, cfg.caption_vocab_size)?;
        let mut header = init.header.clone();
        header.merges = None;
        let mut loaded = LoadedModel::from_checkpoint(&Checkpoint {
            header,
            tensors: init.tensors.clone(),
        })?;
        let caption = CaptionModel::new(&loaded.store, cfg.caption_config(tok.vocab_size()))?;
        loaded.caption = Some((caption, tok));
        let trainable: Vec<_> = loaded
            .store
            .vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(CAPTION_PREFIX))
            .collect();
        let opt = AdamW::new(trainable, cfg.adam())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        Ok(Self {
            cfg,
            loaded,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let expected = cfg.trajectory_hash();
        if ck.header.config_hash != expected || ck.header.phase != Phase::Finetune {
            return Err(Error::ResumeMismatch {
                expected,
                found: ck.header.config_hash.clone(),
            });
        }
        let loaded = LoadedModel::from_checkpoint(ck)?;
        let trainable: Vec<_> = loaded
            .store
            .vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(CAPTION_PREFIX))
            .collect();
        let mut opt = AdamW::new(trainable, cfg.adam())?;
        opt.load_state(ck.header.optimizer_step, &ck.tensors)?;
        let rng = ck
            .header
            .rngs
            .get("noise")
            .map(RngState::restore)
            .ok_or_else(|| Error::NotFound("rng state noise".into()))?;
        Ok(Self {
            step: ck.header.step,
            cfg,
            loaded,
            opt,
            rng,
        })
    }

    pub fn caption_model(&self) -> &CaptionModel {
        &self.loaded.caption.as_ref().expect("caption model present").0
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.loaded.caption.as_ref().expect("caption model present").1
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn check_frozen(&self, grads: &GradStore) -> Result<()> {
        for (name, var) in self.loaded.store.vars() {
            if !name.starts_with(CAPTION_PREFIX) && grads.get(var.as_tensor()).is_some() {
                return Err(Error::FrozenParameter(name));
            }
        }
        Ok(())
    }

    /// One caption update from semantic tokens `(b, C_dec)` of the frozen
    /// image path and their tokenized captions.
    pub fn finetune_caption_step(&mut self, semantic: &Tensor, captions: &[Vec<u32>]) -> Result<LossBreakdown> {
        let semantic = semantic.detach();
        let (model, _) = self.loaded.caption.as_ref().expect("caption model present");
        let mut ctx = Ctx::train(&mut self.rng);
        let logits = model.forward_train(&semantic, captions, &mut ctx)?;
        let (rows, targets) = CaptionModel::caption_targets(&logits, captions)?;
        let ce = caption_ce(&rows, &targets)?;
        let grads = ce.backward()?;
        self.check_frozen(&grads)?;
        self.opt.step(&grads, self.cfg.lr(self.step))?;
        self.step += 1;
        Ok(LossBreakdown {
            caption_ce: Some(scalar(&ce)?),
            ..LossBreakdown::default()
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = store_tensors(&self.loaded.store);
        tensors.extend(self.opt.state_tensors());
        tensors.insert(SOURCE_WEIGHTS.into(), self.loaded.source_weights.clone());
        tensors.insert(TARGET_WEIGHTS.into(), self.loaded.target_weights.clone());
        Ok(Checkpoint {
            header: CheckpointHeader {
                phase: Phase::Finetune,
                config: self.cfg.clone(),
                config_hash: self.cfg.trajectory_hash(),
                step: self.step,
                optimizer_step: self.opt.step_count(),
                rngs: [("noise".to_owned(), RngState::capture(&self.rng))].into(),
                concepts: self.loaded.concepts.clone(),
                merges: Some(self.tokenizer().merges().to_vec()),
            },
            tensors,
        })
    }
}

/// Caption fine-tuning loop: GT-box semantic tokens from the frozen image
/// path, tokenized captions, seeded minibatches over all regions.
pub fn train_finetune(cfg: &TrainConfig, init: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let dataset = Dataset::load(&cfg.data_dir)?;
    run_finetune(cfg, &dataset, &Checkpoint::load(init)?, None)
}

pub fn run_finetune(cfg: &TrainConfig, dataset: &Dataset, init: &Checkpoint, stop_at: Option<u64>) -> Result<RunSummary> {
    let started = Instant::now();
    if init.header.phase != Phase::Pretrain && init.header.merges.is_some() && !cfg.resume {
        log::warn!("initializing from a fine-tuned checkpoint; its caption model is discarded");
    }
    let captions: Vec<&str> = dataset.regions().map(|(_, r)| r.caption.as_str()).collect();
    let resuming = cfg.resume && cfg.out.exists();
    let mut ft = if resuming {
        Finetuner::resume(cfg.clone(), &Checkpoint::load(&cfg.out)?)?
    } else {
        Finetuner::new(cfg.clone(), init, &captions)?
    };
    let tokens = box_semantic_tokens(&ft.loaded.region, dataset)?;
    let dim = ft.loaded.region.config.decoder_dim;
    let encoded: Vec<Vec<u32>> = captions.iter().map(|c| ft.tokenizer().encode(c)).collect();
    let mut log = MetricsLog::open(&cfg.metrics, resuming)?;
    let n = tokens.len();
    let mut last = None;
    while ft.step < cfg.steps {
        let step = ft.step;
        let idx = batch_indices(cfg.seed, step, cfg.caption_batch.min(n), n);
        let flat: Vec<f32> = idx.iter().flat_map(|&i| tokens[i].1.iter().copied()).collect();
        let sem = Tensor::from_vec(flat, (idx.len(), dim), &Device::Cpu)?;
        let caps: Vec<Vec<u32>> = idx.iter().map(|&i| encoded[i].clone()).collect();
        let lr = cfg.lr(step);
        let losses = ft.finetune_caption_step(&sem, &caps)?;
        let done = ft.step;
        let ce = losses.caption_ce.unwrap_or(f64::NAN);
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps || done == 1) {
            let rec = StepRecord {
                phase: Phase::Finetune,
                step: done,
                lr,
                prompts: idx.len(),
                losses,
                total: ce,
                elapsed_s: started.elapsed().as_secs_f64(),
            };
            log::info!("finetune step {done}/{} caption_ce {ce:.4}", cfg.steps);
            log.write(&serde_json::to_value(&rec)?)?;
        }
        last = Some(losses);
        let stop = stop_at == Some(done);
        if save_due(done, cfg.checkpoint_every, cfg.steps) || stop {
            ft.checkpoint()?.save(&cfg.out)?;
        }
        if stop {
            break;
        }
    }
    Ok(RunSummary {
        steps: ft.step,
        final_losses: last,
        seconds: started.elapsed().as_secs_f64(),
        checkpoint: cfg.out.clone(),
    })
}

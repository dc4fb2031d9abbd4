//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The end-to-end desk run takes a long time on small machines. Set
//! `TAP_E2E=skip` to leave it out (reported as SKIP) and `TAP_E2E_DIR` to
//! keep its artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use half::f16;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tap_core::candle_core::{DType, Device, Tensor, Var};
use tap_core::captioner::{apply_rotary, CaptionConfig, CaptionModel, Tokenizer};
use tap_core::datastore::{precompute_embeddings, Dataset, EmbeddingStore, EmbeddingStoreWriter, SynthConfig};
use tap_core::evaluator::evaluate;
use tap_core::inference::TapModel;
use tap_core::losses::{caption_ce, concept_kl, dice_loss, focal_loss, mask_total, FocalParams, KlDirection, LossBreakdown};
use tap_core::network::audit::{audit, expected_shapes};
use tap_core::network::{route, NetworkConfig, RegionModel};
use tap_core::nn::{Ctx, ParamStore};
use tap_core::raster::Mask;
use tap_core::sampler::{
    inference_points, sample_stage1, sample_stage2, PointLabel, PromptKind, PromptPoint, PromptSet, Stage2Branch,
};
use tap_core::teacher::{SyntheticTeacher, TeacherConfig};
use tap_core::trainer::checkpoint::Checkpoint;
use tap_core::trainer::{lr_at, run_finetune, run_pretrain, teacher_targets, train_finetune, train_pretrain, TrainConfig};
use tap_core::vocab::{dataset_vocab_weights, merge_and_dedup, ConceptVocabulary, VocabBundle};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- vocabulary

/// Literal transcription: lowercase everything, keep unique names, drop a
/// name when it is another name plus "s" or "es", sort.
fn naive_vocabulary(lists: &[Vec<String>]) -> Vec<String> {
    let mut all: Vec<String> = Vec::new();
    for list in lists {
        for name in list {
            let lower = name.to_lowercase();
            if !all.contains(&lower) {
                all.push(lower);
            }
        }
    }
    let mut kept = Vec::new();
    for name in &all {
        let mut plural = false;
        for other in &all {
            if *name == format!("{other}s") || *name == format!("{other}es") {
                plural = true;
            }
        }
        if !plural {
            kept.push(name.clone());
        }
    }
    kept.sort();
    kept
}

fn random_name(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..4);
    let mut s: String = (0..len)
        .map(|_| ['a', 'b', 'x', 'A', 'B', 'X', ' '][rng.gen_range(0..7)])
        .collect();
    if s.trim().is_empty() {
        s = "a".into();
    }
    match rng.gen_range(0..4) {
        0 => s.push('s'),
        1 => s.push_str("es"),
        2 => s.push_str("ES"),
        _ => {}
    }
    s
}

fn vocabulary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let teacher = SyntheticTeacher::new(TeacherConfig::default());
    let mut worst_norm = 0f64;
    for trial in 0..1000 {
        let lists: Vec<Vec<String>> = (0..rng.gen_range(1..5))
            .map(|_| (0..rng.gen_range(1..10)).map(|_| random_name(&mut rng)).collect())
            .collect();
        let got = merge_and_dedup(&lists).map_err(e)?;
        ensure(got.concepts() == naive_vocabulary(&lists).as_slice(), format!("trial {trial}: oracle mismatch"))?;
        let again = merge_and_dedup(&[got.concepts().to_vec()]).map_err(e)?;
        ensure(again == got, format!("trial {trial}: not idempotent"))?;
        let mut shuffled = lists.clone();
        for l in &mut shuffled {
            l.shuffle(&mut rng);
        }
        shuffled.shuffle(&mut rng);
        ensure(merge_and_dedup(&shuffled).map_err(e)? == got, format!("trial {trial}: order dependent"))?;
        if trial % 50 == 0 {
            let bundle = VocabBundle::build(got, &teacher).map_err(e)?;
            for w in [&bundle.source, &bundle.target] {
                for k in 0..w.num_concepts() {
                    let n = w.column(k).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    worst_norm = worst_norm.max((n - 100.0).abs());
                }
            }
        }
    }
    ensure(worst_norm <= 1e-3, format!("column norm off by {worst_norm:e}"))?;
    Ok(format!("1000 randomized inputs match the oracle; max |norm - 100| = {worst_norm:.1e}"))
}

// ----------------------------------------------------------------- gradients

/// Largest norm-wise relative error between autograd and central
/// differences of `f` at `x`.
fn gradient_error(x: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&Tensor::from_vec(x.to_vec(), shape, &Device::Cpu).unwrap()).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-5;
    let eval = |v: Vec<f64>| {
        f(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap())
            .to_scalar::<f64>()
            .unwrap()
    };
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut up = x.to_vec();
        up[i] += h;
        let mut down = x.to_vec();
        down[i] -= h;
        num.push((eval(up) - eval(down)) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = [0f64; 4];
    let dev = Device::Cpu;
    for _ in 0..100 {
        let n = rng.gen_range(2..12);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect();
        let gt_t = Tensor::from_vec(gt.clone(), n, &dev).unwrap();
        let g = gt_t.clone();
        worst[0] = worst[0].max(gradient_error(&logits, &[n], &|x| {
            focal_loss(x, &g, FocalParams::default()).unwrap()
        }));
        let g = gt_t.clone();
        worst[1] = worst[1].max(gradient_error(&logits, &[n], &|x| dice_loss(x, &g).unwrap()));

        let k = rng.gen_range(2..8);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let target = Tensor::from_vec(raw.iter().map(|v| v / sum).collect::<Vec<_>>(), k, &dev).unwrap();
        let student: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst[2] = worst[2].max(gradient_error(&student, &[k], &|x| {
            concept_kl(x, &target, KlDirection::Forward).unwrap()
        }));

        let (rows, v) = (rng.gen_range(1..5), rng.gen_range(2..9));
        let cap: Vec<f64> = (0..rows * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..v as u32)).collect();
        worst[3] = worst[3].max(gradient_error(&cap, &[rows, v], &|x| caption_ce(x, &targets).unwrap()));
    }
    let names = ["focal", "dice", "kl", "caption_ce"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w <= 1e-4, format!("{name} relative error {w:e}"))?;
    }
    Ok(format!(
        "100 random tensors each; max relative error focal {:.1e} dice {:.1e} kl {:.1e} ce {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ------------------------------------------------------- protocol statistics

fn chi_square_p(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

fn protocol() -> Outcome {
    let gt = Mask::from_fn(32, 32, |x, y| (6..22).contains(&x) && (6..22).contains(&y));
    let pred = Mask::from_fn(32, 32, |x, y| (10..26).contains(&x) && (6..22).contains(&y));
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 40_000;
    let (mut boxes, mut nonint) = (0usize, 0usize);
    let mut inter_counts = vec![0usize; 8];
    let mut nonint_counts = vec![0usize; 9];
    for _ in 0..trials {
        let s1 = sample_stage1(&gt, &mut rng).map_err(e)?;
        boxes += usize::from(s1.kind == PromptKind::Box);
        for p in &s1.points {
            let (x, y) = p.pixel(32, 32);
            ensure(s1.kind == PromptKind::Box || gt.get(x, y), "stage-1 point outside the mask")?;
        }
        let (branch, s2) = sample_stage2(&s1, &pred, &gt, &mut rng).map_err(e)?;
        let s2 = s2.ok_or("no stage-2 prompt despite an error region")?;
        match branch {
            Stage2Branch::NonInteractive => {
                nonint += 1;
                nonint_counts[s2.len() - 1] += 1;
            }
            Stage2Branch::Interactive => inter_counts[s2.len() - s1.len() - 1] += 1,
        }
    }
    let box_frac = boxes as f64 / trials as f64;
    let non_frac = nonint as f64 / trials as f64;
    ensure((box_frac - 0.5).abs() <= 0.02, format!("box fraction {box_frac}"))?;
    ensure((non_frac - 0.5).abs() <= 0.02, format!("non-interactive fraction {non_frac}"))?;
    let (p_int, p_non) = (chi_square_p(&inter_counts), chi_square_p(&nonint_counts));
    ensure(p_int > 0.01 && p_non > 0.01, format!("chi-square p {p_int:.4} / {p_non:.4}"))?;

    // hand-computed round(linspace(0, M-1, 9)) indices
    let oracle: [(usize, [usize; 9]); 3] = [
        (1, [0; 9]),
        (9, [0, 1, 2, 3, 4, 5, 6, 7, 8]),
        (100, [0, 12, 25, 37, 50, 62, 74, 87, 99]),
    ];
    for (m, idx) in oracle {
        // M foreground pixels scattered over a 16×16 mask in scan order
        let pixels: Vec<(usize, usize)> = (0..m).map(|i| ((i * 7) % 16, (i * 7) / 16 * 2 % 16)).collect();
        let mut uniq: Vec<(usize, usize)> = pixels.iter().map(|&(x, y)| (y, x)).collect::<BTreeSet<_>>().into_iter().collect();
        if uniq.len() != m {
            uniq = (0..m).map(|i| (i / 16, i % 16)).collect();
        }
        let mask = Mask::from_fn(16, 16, |x, y| uniq.contains(&(y, x)));
        let scan: Vec<(usize, usize)> = uniq.iter().map(|&(y, x)| (x, y)).collect();
        let pts = inference_points(&mask).map_err(e)?;
        ensure(pts.len() == 9, format!("M={m}: {} points", pts.len()))?;
        for (p, &i) in pts.points.iter().zip(&idx) {
            let (x, y) = p.pixel(16, 16);
            ensure(mask.get(x, y), format!("M={m}: point off the mask"))?;
            ensure((x, y) == scan[i], format!("M={m}: expected pixel {:?}, got {:?}", scan[i], (x, y)))?;
        }
    }
    Ok(format!(
        "{trials} trials: box {box_frac:.4}, non-interactive {non_frac:.4}, chi-square p {p_int:.3} (1..8) {p_non:.3} (1..9); index oracle M=1,9,100"
    ))
}

// ------------------------------------------------------------------- routing

fn expected_route(kind: PromptKind, iou: &[f32; 4]) -> usize {
    if kind == PromptKind::Box {
        return 0;
    }
    let best = iou[1].max(iou[2]).max(iou[3]);
    (1..4).find(|&i| iou[i] == best).unwrap()
}

fn routing() -> Outcome {
    let levels = [0.0f32, 0.25, 0.5, 0.75, 1.0];
    let mut checked = 0;
    for a in levels {
        for b in levels {
            for c in levels {
                for d in levels {
                    let iou = [a, b, c, d];
                    for kind in [PromptKind::Box, PromptKind::Points, PromptKind::Sketch] {
                        ensure(route(kind, &iou) == expected_route(kind, &iou), format!("{kind:?} {iou:?}"))?;
                        checked += 1;
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100_000 {
        let iou: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..2.0));
        for kind in [PromptKind::Box, PromptKind::Points, PromptKind::Sketch] {
            ensure(route(kind, &iou) == expected_route(kind, &iou), format!("{kind:?} {iou:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} cases (all 625 tie-heavy grids plus 100k random vectors)"))
}

// ---------------------------------------------------------- decoder contract

fn decoder_contract() -> Outcome {
    let cfg = NetworkConfig::tiny();
    let store = ParamStore::new(3, Device::Cpu);
    let model = RegionModel::new(&store, cfg.clone()).map_err(e)?;
    audit(&store, &cfg).map_err(e)?;
    let desk_store = ParamStore::new(3, Device::Cpu);
    let desk = NetworkConfig::desk();
    RegionModel::new(&desk_store, desk.clone()).map_err(e)?;
    audit(&desk_store, &desk).map_err(e)?;

    let image = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 8) as u8, (y * 8) as u8, 90]));
    let pt = |x: f32, y: f32, label| PromptPoint { x, y, label };
    let prompts = vec![
        PromptSet::new(
            PromptKind::Box,
            vec![pt(0.1, 0.2, PointLabel::BoxTopLeft), pt(0.6, 0.7, PointLabel::BoxBottomRight)],
        )
        .map_err(e)?,
        PromptSet::new(PromptKind::Points, vec![pt(0.5, 0.5, PointLabel::Positive), pt(0.1, 0.9, PointLabel::Negative)])
            .map_err(e)?,
        PromptSet::new(PromptKind::Sketch, (0..9).map(|i| pt(0.1 * i as f32, 0.5, PointLabel::Positive)).collect())
            .map_err(e)?,
    ];
    let bundles = model.predict(&image, &prompts).map_err(e)?;
    let side = 4 * cfg.image_size / cfg.patch_size;
    for b in &bundles {
        ensure(b.mask_tokens.len() == 4 && b.semantic_tokens.len() == 4, "token counts")?;
        ensure(b.num_output_tokens() == 9, "output token count")?;
        ensure(b.mask_tokens.iter().chain(&b.semantic_tokens).all(|t| t.len() == cfg.decoder_dim), "token width")?;
        ensure(b.iou_token.len() == cfg.decoder_dim, "iou token width")?;
        ensure(b.mask_logits.len() == 4 && b.mask_logits.iter().all(|m| m.len() == side * side), "mask maps")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0f64;
    for _ in 0..200 {
        let n = rng.gen_range(4..64);
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3) as u8)).collect();
        let (l, g) = (Tensor::new(l, &Device::Cpu).unwrap(), Tensor::new(g, &Device::Cpu).unwrap());
        let f = focal_loss(&l, &g, FocalParams::default()).map_err(e)?;
        let d = dice_loss(&l, &g).map_err(e)?;
        let t = mask_total(&f, &d).map_err(e)?.to_scalar::<f64>().unwrap();
        let (fv, dv) = (f.to_scalar::<f64>().unwrap(), d.to_scalar::<f64>().unwrap());
        worst = worst.max((t - (20.0 * fv + dv)).abs());
        let b = LossBreakdown::new(fv, dv, 0.0, 0.0);
        worst = worst.max((b.mask_total - (20.0 * fv + dv)).abs());
    }
    ensure(worst <= 1e-6, format!("mask_total deviates by {worst:e}"))?;

    let w = Tensor::randn(0f32, 1.0, (cfg.text_dim, cfg.num_concepts), &Device::Cpu).unwrap();
    let tok = Tensor::new(bundles[0].semantic_tokens[0].as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
    let logits = model.semantic_head.concept_logits(&tok, &w).map_err(e)?;
    ensure(logits.dims() == [1, cfg.num_concepts], "concept logits shape")?;

    let full = NetworkConfig::full();
    let shapes = expected_shapes(&full);
    let head: Vec<(String, Vec<usize>)> = shapes
        .iter()
        .filter(|(k, _)| k.starts_with("semantic_head.") && k.ends_with(".weight"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let dims: Vec<Vec<usize>> = head.iter().map(|(_, v)| v.clone()).collect();
    ensure(
        dims == vec![vec![1024, 256], vec![1024, 1024], vec![1024, 1024]],
        format!("full-scale semantic head {head:?}"),
    )?;
    ensure(full.num_concepts == 2560 && full.text_dim == 1024, "full-scale concept geometry")?;
    Ok(format!(
        "9 tokens per prompt; mask_total max deviation {worst:.1e}; tiny/desk stores audited; full-scale head 256->1024->1024->2560"
    ))
}

// ---------------------------------------------------------------- captioner

fn random_caption_model(seed: u64) -> (ParamStore, CaptionModel) {
    let cfg = CaptionConfig {
        token_dim: 16,
        dim: 32,
        layers: 2,
        heads: 2,
        ffn_mult: 4,
        vocab_size: 40,
        max_tokens: 12,
        dropout: 0.3,
        rope_base: 10000.0,
    };
    let store = ParamStore::new(seed, Device::Cpu);
    let model = CaptionModel::new(&store, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, v) in store.vars() {
        let data: Vec<f32> = (0..v.elem_count()).map(|_| rng.gen_range(-0.6..0.6)).collect();
        store.assign(&name, &Tensor::from_vec(data, v.shape(), &Device::Cpu).unwrap()).unwrap();
    }
    (store, model)
}

fn captioner() -> Outcome {
    let mut logit_gap = 0f32;
    let mut nontrivial = 0;
    for seed in 0..100u64 {
        let (_store, model) = random_caption_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sem: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sem = Tensor::from_vec(sem, (1, 16), &Device::Cpu).unwrap();
        let cached = model.generate(&sem).map_err(e)?.remove(0);
        let uncached = model.generate_uncached(&sem).map_err(e)?;
        ensure(cached == uncached, format!("seed {seed}: {cached:?} vs {uncached:?}"))?;
        nontrivial += usize::from(cached.len() > 1);
        let steps = model.cached_step_logits(&sem, &cached).map_err(e)?;
        let full = model
            .forward_train(&sem, std::slice::from_ref(&cached), &mut Ctx::eval())
            .map_err(e)?
            .get(0)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        for (i, s) in steps.iter().enumerate() {
            for (a, b) in s.iter().zip(&full[i + 1]) {
                logit_gap = logit_gap.max((a - b).abs());
            }
        }
    }
    ensure(logit_gap <= 1e-5, format!("cached logits differ by {logit_gap:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut norm_err, mut shift_err) = (0f32, 0f32);
    for _ in 0..2000 {
        let d = 2 * rng.gen_range(1..17);
        let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (m, n, s) = (rng.gen_range(0..48), rng.gen_range(0..48), rng.gen_range(0..16));
        let rq = apply_rotary(&q, m, 1e4).map_err(e)?;
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        norm_err = norm_err.max((norm(&rq) - norm(&q)).abs());
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        let base = dot(&rq, &apply_rotary(&k, n, 1e4).map_err(e)?);
        let shifted = dot(&apply_rotary(&q, m + s, 1e4).map_err(e)?, &apply_rotary(&k, n + s, 1e4).map_err(e)?);
        shift_err = shift_err.max((base - shifted).abs());
    }
    ensure(norm_err <= 1e-5 && shift_err <= 1e-5, format!("rotary errors {norm_err:e} / {shift_err:e}"))?;

    let (_store, model) = random_caption_model(500);
    let sem = Tensor::randn(0f32, 1.0, (1, 16), &Device::Cpu).unwrap();
    let tokens: Vec<u32> = vec![5, 9, 12, 3, 30, 7];
    let base = model.forward_train(&sem, &[tokens.clone()], &mut Ctx::eval()).map_err(e)?.get(0).unwrap();
    for p in 0..tokens.len() {
        let mut changed = tokens.clone();
        for t in changed.iter_mut().skip(p) {
            *t = (*t + 11) % 40;
        }
        let other = model.forward_train(&sem, &[changed], &mut Ctx::eval()).map_err(e)?.get(0).unwrap();
        // rows 0..=p see only [SEM][BOS] t₁…t_p
        let a = base.narrow(0, 0, p + 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = other.narrow(0, 0, p + 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        ensure(a == b, format!("position {p} sees a future token"))?;
    }

    let ds = Dataset::synthesize(SynthConfig {
        num_images: 300,
        seed: 8,
        ..SynthConfig::default()
    })
    .map_err(e)?;
    let captions: Vec<String> = ds.regions().map(|(_, r)| r.caption.clone()).collect();
    let tok = Tokenizer::train(&captions, 512).map_err(e)?;
    for c in &captions {
        ensure(tok.decode(&tok.encode(c)).map_err(e)? == *c, format!("round trip failed on {c:?}"))?;
    }
    Ok(format!(
        "cache == oracle on 100 seeds ({nontrivial} multi-token), logit gap {logit_gap:.1e}; rotary norm {norm_err:.1e} shift {shift_err:.1e}; causal; {} captions round-trip",
        captions.len()
    ))
}

// ------------------------------------------------------------------ storage

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn storage() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dim = 24;
    let mut w = EmbeddingStoreWriter::create(&tmp.path().join("raw"), dim, 7).map_err(e)?;
    let mut written = Vec::new();
    for i in 0..50 {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        w.push(&format!("k{i:03}"), &v).map_err(e)?;
        written.push(v);
    }
    let store = w.finish().map_err(e)?;
    for (i, v) in written.iter().enumerate() {
        let got = store.read_embedding(&format!("k{i:03}")).map_err(e)?.to_f32();
        let want: Vec<f32> = v.iter().map(|&x| f16::from_f32(x).to_f32()).collect();
        ensure(got == want, format!("record {i} not the nearest half values"))?;
        // half values survive a second trip bit for bit
        let mut w2 = EmbeddingStoreWriter::create(&tmp.path().join(format!("re{i}")), dim, 4).map_err(e)?;
        w2.push("x", &got).map_err(e)?;
        let again = w2.finish().map_err(e)?.read_embedding("x").map_err(e)?.to_f32();
        ensure(again.iter().map(|v| v.to_bits()).eq(got.iter().map(|v| v.to_bits())), "half round trip")?;
    }

    // corrupt one payload byte of a shard
    let raw = tmp.path().join("raw");
    let shard = fs::read_dir(&raw)
        .map_err(e)?
        .map(|d| d.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x != "json"))
        .min()
        .ok_or("no shard files")?;
    let mut bytes = fs::read(&shard).map_err(e)?;
    bytes[40] ^= 0x10;
    fs::write(&shard, bytes).map_err(e)?;
    let reopened = EmbeddingStore::open(&raw);
    let detected = match reopened {
        Err(_) => true,
        Ok(s) => (0..50).any(|i| s.read_embedding(&format!("k{i:03}")).is_err()),
    };
    ensure(detected, "corrupted shard read without error")?;

    // N regions in, N records out, same keys
    let synth = SynthConfig {
        num_images: 60,
        seed: 3,
        ..SynthConfig::default()
    };
    let ds = Dataset::synthesize(synth.clone()).map_err(e)?;
    let teacher = SyntheticTeacher::new(TeacherConfig::default());
    let run = |name: &str| -> Result<PathBuf, String> {
        let data = tmp.path().join(format!("{name}-data"));
        let emb = tmp.path().join(format!("{name}-emb"));
        let d = Dataset::synthesize(synth.clone()).map_err(e)?;
        d.save(&data, 16).map_err(e)?;
        let loaded = Dataset::load(&data).map_err(e)?;
        let mut w = EmbeddingStoreWriter::create(&emb, 64, 50).map_err(e)?;
        precompute_embeddings(&loaded, &teacher, &mut w).map_err(e)?;
        w.finish().map_err(e)?;
        Ok(tmp.path().join(name))
    };
    run("a")?;
    run("b")?;
    let store = EmbeddingStore::open(&tmp.path().join("a-emb")).map_err(e)?;
    let keys: BTreeSet<String> = store.keys().map_err(e)?.into_iter().collect();
    let ids: BTreeSet<String> = ds.regions().map(|(_, r)| r.region_id.clone()).collect();
    ensure(keys == ids && store.len() == ds.num_regions(), "precompute is not a bijection")?;
    for suffix in ["data", "emb"] {
        ensure(
            dir_bytes(&tmp.path().join(format!("a-{suffix}"))) == dir_bytes(&tmp.path().join(format!("b-{suffix}"))),
            format!("{suffix} output differs between identical seeded runs"),
        )?;
    }
    Ok(format!(
        "half round trip exact on 50 records; corruption detected; {} regions -> {} records; byte-identical reruns",
        ds.num_regions(),
        store.len()
    ))
}

// ----------------------------------------------------------------- schedule

fn small_setup() -> (TrainConfig, Dataset, VocabBundle) {
    let synth = SynthConfig {
        num_images: 12,
        num_concepts: 6,
        seed: 21,
        image_size: 32,
        min_shapes: 1,
        max_shapes: 3,
        min_side: 8,
        max_side: 14,
        min_area: 16,
        first_index: 0,
    };
    let ds = Dataset::synthesize(synth).unwrap();
    let teacher = SyntheticTeacher::new(TeacherConfig {
        dim: 16,
        ..TeacherConfig::default()
    });
    let vocab = ConceptVocabulary::from_sorted(ds.concepts().to_vec()).unwrap();
    let bundle = VocabBundle::build(vocab, &teacher).unwrap();
    let cfg = TrainConfig {
        steps: 6,
        batch_images: 2,
        prompt_cap: 8,
        log_every: 1,
        checkpoint_every: 0,
        network: NetworkConfig {
            num_concepts: 6,
            drop_path: 0.1,
            decoder_dropout: 0.1,
            ..NetworkConfig::tiny()
        },
        caption_dim: 16,
        caption_layers: 1,
        caption_heads: 2,
        caption_vocab_size: 300,
        caption_batch: 4,
        ..TrainConfig::default()
    };
    (cfg, ds, bundle)
}

fn metric_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_s");
            v
        })
        .collect()
}

fn tensors_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().all(|(k, t)| {
            b.tensors.get(k).is_some_and(|u| {
                let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                let y = u.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
            })
        })
}

fn schedule() -> Outcome {
    let pts = [(0u64, 1e-3), (500, 5.05e-4), (1000, 1e-5)];
    for (s, want) in pts {
        let got = lr_at(s, 1000, 1e-3, 1e-5);
        ensure((got - want).abs() <= 1e-12, format!("lr_at({s}) = {got}"))?;
    }
    let tmp = tempfile::tempdir().map_err(e)?;
    let (base, ds, bundle) = small_setup();
    let store = {
        let dir = tmp.path().join("emb");
        let mut w = EmbeddingStoreWriter::create(&dir, 16, 64).map_err(e)?;
        let teacher = SyntheticTeacher::new(TeacherConfig {
            dim: 16,
            ..TeacherConfig::default()
        });
        precompute_embeddings(&ds, &teacher, &mut w).map_err(e)?;
        w.finish().map_err(e)?
    };
    let targets = teacher_targets(&ds, &store, &bundle.target).map_err(e)?;
    let with_paths = |name: &str, resume: bool| TrainConfig {
        out: tmp.path().join(format!("{name}.ckpt")),
        metrics: tmp.path().join(format!("{name}.jsonl")),
        resume,
        ..base.clone()
    };
    run_pretrain(&with_paths("full", false), &ds, &targets, bundle.clone(), None).map_err(e)?;
    run_pretrain(&with_paths("split", false), &ds, &targets, bundle.clone(), Some(3)).map_err(e)?;
    run_pretrain(&with_paths("split", true), &ds, &targets, bundle.clone(), None).map_err(e)?;
    let full = Checkpoint::load(&tmp.path().join("full.ckpt")).map_err(e)?;
    let split = Checkpoint::load(&tmp.path().join("split.ckpt")).map_err(e)?;
    ensure(full.header.step == 6 && split.header.step == 6, "step counts")?;
    ensure(tensors_equal(&full, &split), "pretrain resume diverged")?;
    ensure(
        metric_lines(&tmp.path().join("full.jsonl")) == metric_lines(&tmp.path().join("split.jsonl")),
        "pretrain metrics diverged",
    )?;

    let ft = |name: &str, resume: bool| TrainConfig {
        steps: 4,
        ..with_paths(name, resume)
    };
    run_finetune(&ft("ft-full", false), &ds, &full, None).map_err(e)?;
    run_finetune(&ft("ft-split", false), &ds, &full, Some(2)).map_err(e)?;
    run_finetune(&ft("ft-split", true), &ds, &full, None).map_err(e)?;
    let a = Checkpoint::load(&tmp.path().join("ft-full.ckpt")).map_err(e)?;
    let b = Checkpoint::load(&tmp.path().join("ft-split.ckpt")).map_err(e)?;
    ensure(tensors_equal(&a, &b), "fine-tune resume diverged")?;
    Ok("lr_at(0, T/2, T) = 1e-3, 5.05e-4, 1e-5; pretrain and fine-tune resume bit-exact".into())
}

// -------------------------------------------------------------- end to end

fn config_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn image_path_bits(ck: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    ck.tensors
        .iter()
        .filter(|(k, _)| tap_core::network::IMAGE_PATH_PREFIXES.iter().any(|p| k.starts_with(p)))
        .map(|(k, t)| {
            let v = t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            (k.clone(), v.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let keep = std::env::var_os("TAP_E2E_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().map_err(e)?;
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&root).map_err(e)?;
    let mut pre = TrainConfig::load(&config_file("desk_pretrain.toml")).map_err(e)?;
    let mut fin = TrainConfig::load(&config_file("desk_finetune.toml")).map_err(e)?;
    for c in [&mut pre, &mut fin] {
        c.data_dir = root.join("train");
        c.embeddings_dir = root.join("emb");
        c.vocab_dir = root.join("vocab");
        c.resume = false;
    }
    pre.out = root.join("pretrain.ckpt");
    pre.metrics = root.join("pretrain.jsonl");
    fin.out = root.join("finetune.ckpt");
    fin.metrics = root.join("finetune.jsonl");

    let train = Dataset::synthesize(SynthConfig {
        num_images: 2000,
        num_concepts: 12,
        seed: 0,
        ..SynthConfig::default()
    })
    .map_err(e)?;
    train.save(&pre.data_dir, 256).map_err(e)?;
    let val = Dataset::synthesize(SynthConfig {
        num_images: 200,
        num_concepts: 12,
        seed: 1,
        first_index: 1_000_000,
        ..SynthConfig::default()
    })
    .map_err(e)?;
    let teacher = SyntheticTeacher::new(TeacherConfig {
        noise_sigma: 0.05,
        ..TeacherConfig::default()
    });
    let mut w = EmbeddingStoreWriter::create(&pre.embeddings_dir, 64, 4096).map_err(e)?;
    precompute_embeddings(&train, &teacher, &mut w).map_err(e)?;
    w.finish().map_err(e)?;
    let vocab = merge_and_dedup(&[train.concepts().to_vec()]).map_err(e)?;
    VocabBundle::build(vocab, &teacher).map_err(e)?.save(&pre.vocab_dir).map_err(e)?;

    let t = Instant::now();
    train_pretrain(&pre).map_err(e)?;
    let pre_min = t.elapsed().as_secs_f64() / 60.0;
    let t = Instant::now();
    train_finetune(&fin, &pre.out).map_err(e)?;
    let fin_min = t.elapsed().as_secs_f64() / 60.0;

    let frozen = image_path_bits(&Checkpoint::load(&pre.out).map_err(e)?)
        == image_path_bits(&Checkpoint::load(&fin.out).map_err(e)?);
    let model = TapModel::load(&fin.out).map_err(e)?;
    let weights = dataset_vocab_weights(val.concepts(), &teacher).map_err(e)?;
    let report = evaluate(&model, &val, &weights).map_err(e)?;
    fs::write(root.join("report.json"), serde_json::to_string_pretty(&report).map_err(e)?).map_err(e)?;
    let bleu = report.bleu4.unwrap_or(0.0);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    // wall-clock budget scales with the cores actually available, up to four
    let (pre_budget, fin_budget) = (30.0 * 4.0 / cores as f64, 10.0 * 4.0 / cores as f64);
    let summary = format!(
        "mIoU {:.3} top-1 {:.3} BLEU-4 {:.3} frozen {} | pretrain {:.1} min (budget {:.0}) fine-tune {:.1} min (budget {:.0}) on {} core(s)",
        report.miou, report.top1, bleu, frozen, pre_min, pre_budget, fin_min, fin_budget, cores
    );
    let ok = report.miou >= 0.75
        && report.top1 >= 0.90
        && bleu >= 0.50
        && frozen
        && pre_min <= pre_budget
        && fin_min <= fin_budget;
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    let mut criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("vocabulary", vocabulary),
        ("gradients", gradients),
        ("protocol statistics", protocol),
        ("routing", routing),
        ("decoder contract", decoder_contract),
        ("captioner", captioner),
        ("storage", storage),
        ("schedule", schedule),
    ];
    let skip_e2e = std::env::var("TAP_E2E").is_ok_and(|v| v == "skip");
    if !skip_e2e {
        criteria.push(("end-to-end desk run", end_to_end));
    }
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if skip_e2e {
        println!("SKIP end-to-end desk run: TAP_E2E=skip");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

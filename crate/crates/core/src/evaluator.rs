//! Desk-scale evaluation: GT-box segmentation quality, zero-shot
//! classification, caption BLEU-4 and sampling audits.

use std::collections::{BTreeMap, HashMap};

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::datastore::Dataset;
use crate::error::{Error, Result};
use crate::inference::{routed_mask, TapModel};
use crate::network::{route, NUM_SLOTS};
use crate::raster::Mask;
use crate::sampler::{
    box_prompt, inference_points, sample_stage1, sample_stage2, PromptKind, PromptSet, Stage2Branch, MAX_POINTS,
};
use crate::vocab::ConceptWeightMatrix;

/// Mean IoU over paired masks; 0 for an empty list.
pub fn mean_iou(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sum += p.iou(g)?;
    }
    Ok(sum / gt.len() as f64)
}

/// Fraction of rankings whose first `k` entries contain the label.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|c| c == *l))
        .count();
    hits as f64 / labels.len() as f64
}

fn ngram_counts(words: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with one reference per candidate: clipped n-gram
/// precisions for n = 1..4, geometric mean, brevity penalty, no smoothing.
/// Text is split on whitespace.
pub fn corpus_bleu4<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::DimensionMismatch {
            expected: references.len(),
            got: candidates.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let cw: Vec<&str> = c.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        c_len += cw.len();
        r_len += rw.len();
        for n in 1..=4 {
            let cc = ngram_counts(&cw, n);
            let rc = ngram_counts(&rw, n);
            total[n - 1] += cw.len().saturating_sub(n - 1);
            matched[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptAccuracy {
    pub instances: usize,
    pub top1_correct: usize,
}

/// Selected-slot histograms per prompt kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingAudit {
    pub box_slots: [usize; NUM_SLOTS],
    pub sketch_slots: [usize; NUM_SLOTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    /// GT-box prompts, routed mask at probability 0.5.
    pub miou: f64,
    /// Nine-point prompts from the GT mask.
    pub sketch_miou: f64,
    pub top1: f64,
    pub top5: f64,
    pub bleu4: Option<f64>,
    pub per_concept: BTreeMap<String, ConceptAccuracy>,
    pub routing: RoutingAudit,
    /// A few `(reference, generated)` caption pairs.
    pub caption_samples: Vec<(String, String)>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut rates = vec![self.miou, self.sketch_miou, self.top1, self.top5];
        rates.extend(self.bleu4);
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("rate outside [0, 1]".into()));
        }
        let n: usize = self.per_concept.values().map(|c| c.instances).sum();
        if n != self.instances || self.top5 < self.top1 {
            return Err(Error::InvalidConfig("inconsistent report".into()));
        }
        Ok(())
    }
}

/// Runs every evaluation over `dataset`. `dataset_weights` columns follow
/// `dataset.concepts()`.
pub fn evaluate(model: &TapModel, dataset: &Dataset, dataset_weights: &ConceptWeightMatrix) -> Result<EvalReport> {
    let names = dataset.concepts();
    if dataset_weights.num_concepts() != names.len() {
        return Err(Error::DimensionMismatch {
            expected: names.len(),
            got: dataset_weights.num_concepts(),
        });
    }
    let weights: Tensor = dataset_weights.to_tensor(&Device::Cpu)?;
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut box_masks = Vec::new();
    let mut sketch_masks = Vec::new();
    let mut gts = Vec::new();
    let mut rankings = Vec::new();
    let mut labels = Vec::new();
    let mut generated = Vec::new();
    let mut references = Vec::new();
    let mut per_concept: BTreeMap<String, ConceptAccuracy> = BTreeMap::new();
    let mut routing = RoutingAudit::default();

    for rec in dataset.records() {
        if rec.regions.is_empty() {
            continue;
        }
        let (w, h) = (rec.image.width() as usize, rec.image.height() as usize);
        let grid = model.encode(&rec.image)?;
        let mut prompts: Vec<PromptSet> = Vec::with_capacity(rec.regions.len() * 2);
        for r in &rec.regions {
            prompts.push(box_prompt(&r.mask)?);
        }
        for r in &rec.regions {
            prompts.push(inference_points(&r.mask)?);
        }
        let bundles = model.inner.region.predict_on_grid(&grid, &prompts)?;
        let n = rec.regions.len();
        let mut tokens = Vec::with_capacity(n);
        for (i, r) in rec.regions.iter().enumerate() {
            let b = &bundles[i];
            let slot = route(PromptKind::Box, &b.iou_pred);
            routing.box_slots[slot] += 1;
            box_masks.push(routed_mask(b, slot, w, h)?);
            let s = &bundles[n + i];
            let s_slot = route(PromptKind::Sketch, &s.iou_pred);
            routing.sketch_slots[s_slot] += 1;
            sketch_masks.push(routed_mask(s, s_slot, w, h)?);
            gts.push(r.mask.clone());

            let label = *index
                .get(r.concept.as_str())
                .ok_or_else(|| Error::NotFound(format!("concept {}", r.concept)))?;
            let ranked = model.classify_zero_shot(&b.semantic_tokens[slot], &weights, 5)?;
            let entry = per_concept.entry(r.concept.clone()).or_default();
            entry.instances += 1;
            entry.top1_correct += usize::from(ranked.first() == Some(&label));
            rankings.push(ranked);
            labels.push(label);
            tokens.push(b.semantic_tokens[slot].clone());
            references.push(r.caption.clone());
        }
        if model.has_captioner() {
            generated.extend(model.captions(&tokens)?);
        }
    }

    let bleu4 = if model.has_captioner() {
        Some(corpus_bleu4(&generated, &references)?)
    } else {
        None
    };
    let caption_samples = references
        .iter()
        .zip(&generated)
        .take(8)
        .map(|(r, g)| (r.clone(), g.clone()))
        .collect();
    let report = EvalReport {
        instances: gts.len(),
        miou: mean_iou(&box_masks, &gts)?,
        sketch_miou: mean_iou(&sketch_masks, &gts)?,
        top1: topk_accuracy(&rankings, &labels, 1),
        top5: topk_accuracy(&rankings, &labels, 5),
        bleu4,
        per_concept,
        routing,
        caption_samples,
    };
    report.validate()?;
    Ok(report)
}

/// Empirical prompt-sampling statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerAudit {
    pub trials: usize,
    pub box_fraction: f64,
    pub noninteractive_fraction: f64,
    /// Corrective point counts 1..=8 of the interactive branch.
    pub interactive_counts: Vec<usize>,
    /// Point counts 1..=9 of the non-interactive branch.
    pub noninteractive_counts: Vec<usize>,
    pub interactive_p: f64,
    pub noninteractive_p: f64,
}

/// Chi-square goodness-of-fit p-value of `counts` against uniform.
pub fn chi_square_uniform_p(counts: &[usize]) -> Result<f64> {
    let n: usize = counts.iter().sum();
    if counts.len() < 2 || n == 0 {
        return Err(Error::InvalidConfig("need at least two bins and one sample".into()));
    }
    let expected = n as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(1.0 - dist.cdf(stat))
}

/// Runs the two-stage sampler `trials` times against a fixed ground truth
/// and a prediction that always leaves errors to correct.
pub fn audit_sampler(rng: &mut impl Rng, trials: usize) -> Result<SamplerAudit> {
    let gt = Mask::from_fn(32, 32, |x, y| (8..24).contains(&x) && (8..24).contains(&y));
    let pred = Mask::from_fn(32, 32, |x, y| (12..28).contains(&x) && (8..24).contains(&y));
    let mut boxes = 0;
    let mut nonint = 0;
    let mut inter_counts = vec![0usize; 8];
    let mut nonint_counts = vec![0usize; MAX_POINTS];
    for _ in 0..trials {
        let s1 = sample_stage1(&gt, rng)?;
        boxes += usize::from(s1.kind == PromptKind::Box);
        let (branch, s2) = sample_stage2(&s1, &pred, &gt, rng)?;
        let s2 = s2.ok_or_else(|| Error::InvalidConfig("prediction has no error region".into()))?;
        match branch {
            Stage2Branch::NonInteractive => {
                nonint += 1;
                nonint_counts[s2.len() - 1] += 1;
            }
            Stage2Branch::Interactive => inter_counts[s2.len() - s1.len() - 1] += 1,
        }
    }
    Ok(SamplerAudit {
        trials,
        box_fraction: boxes as f64 / trials as f64,
        noninteractive_fraction: nonint as f64 / trials as f64,
        interactive_p: chi_square_uniform_p(&inter_counts)?,
        noninteractive_p: chi_square_uniform_p(&nonint_counts)?,
        interactive_counts: inter_counts,
        noninteractive_counts: nonint_counts,
    })
}

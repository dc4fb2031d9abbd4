//! Deterministic stand-in for a frozen vision-language teacher.
//!
//! Text tower: a string is hashed with 64-bit FNV-1a, the hash is xored with
//! `splitmix64(seed)` to form a key, and component `i` of the raw vector is a
//! Box-Muller normal built from `splitmix64(key + (2i)·φ)` and
//! `splitmix64(key + (2i+1)·φ)` where φ = 0x9E3779B97F4A7C15. The vector is
//! normalized in f64. Strings of the form `template(concept)` for one of the
//! registered prompt templates embed as
//! `normalize(v(concept) + template_weight · v(template))`, so templated
//! variants of a concept stay close to the bare concept while differing from
//! each other.
//!
//! Image tower: a masked crop is inspected for a shapes-world object (palette
//! color plus silhouette). A recognized crop embeds as the text embedding of
//! its concept; anything else embeds by a content hash. Gaussian noise with
//! standard deviation `noise_sigma`, keyed by the crop bytes, is then added and
//! the result renormalized.

use crate::datastore::shapes::{Color, ShapeKind};
use crate::datastore::crop_and_mask;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::vocab::{ConceptWeightMatrix, TextEncoder, SOURCE_TEMPLATE, TARGET_TEMPLATE};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-interval sample in (0, 1].
fn unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based standard normal vector keyed by `key`.
pub fn gaussian_vector(key: u64, dim: usize) -> Vec<f64> {
    (0..dim as u64)
        .map(|i| {
            let u1 = unit(splitmix64(key.wrapping_add((2 * i).wrapping_mul(GOLDEN))));
            let u2 = unit(splitmix64(key.wrapping_add((2 * i + 1).wrapping_mul(GOLDEN))));
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn normalized(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub dim: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub template_weight: f64,
    pub crop_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0x7a9,
            noise_sigma: 0.05,
            template_weight: 0.3,
            crop_size: 64,
        }
    }
}

/// Unit-norm teacher embedding of an image region.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherImageEmbedding(pub Vec<f32>);

/// Probability vector over a concept vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution(pub Vec<f32>);

#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    cfg: TeacherConfig,
    templates: Vec<&'static str>,
}

impl SyntheticTeacher {
    pub fn new(cfg: TeacherConfig) -> Self {
        Self {
            cfg,
            templates: vec![TARGET_TEMPLATE, SOURCE_TEMPLATE],
        }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    fn key(&self, bytes: &[u8]) -> u64 {
        fnv1a64(bytes) ^ splitmix64(self.cfg.seed)
    }

    fn raw(&self, text: &str) -> Vec<f64> {
        gaussian_vector(self.key(text.as_bytes()), self.cfg.dim)
    }

    /// Splits `text` into `(template, concept)` when it instantiates a
    /// registered template.
    fn split_template<'a>(&self, text: &'a str) -> Option<(&'static str, &'a str)> {
        self.templates.iter().find_map(|tpl| {
            let (prefix, suffix) = tpl.split_once("{}")?;
            let inner = text.strip_prefix(prefix)?.strip_suffix(suffix)?;
            (!inner.is_empty()).then_some((*tpl, inner))
        })
    }

    /// Embeds a masked region: the crop is extracted, recognized and encoded.
    pub fn encode_masked_crop(&self, image: &RgbImage, mask: &Mask) -> Result<TeacherImageEmbedding> {
        let crop = crop_and_mask(image, mask, self.cfg.crop_size)?;
        self.encode_crop(&crop)
    }

    /// Embeds an already-extracted masked crop (background pixels zero).
    pub fn encode_crop(&self, crop: &RgbImage) -> Result<TeacherImageEmbedding> {
        let content_key = self.key(crop.as_raw()) ^ 0x5eed_c0de;
        let mut base: Vec<f64> = match recognize_shapes_world(crop) {
            Some(concept) => self
                .encode_text(&concept)?
                .into_iter()
                .map(|x| x as f64)
                .collect(),
            None => {
                if crop.pixels().all(|p| p.0 == [0, 0, 0]) {
                    return Err(Error::DegenerateRegion("crop has no foreground".into()));
                }
                let v = gaussian_vector(content_key, self.cfg.dim);
                normalized(&v).into_iter().map(|x| x as f64).collect()
            }
        };
        if self.cfg.noise_sigma > 0.0 {
            let noise = gaussian_vector(splitmix64(content_key), self.cfg.dim);
            for (b, n) in base.iter_mut().zip(noise) {
                *b += self.cfg.noise_sigma * n;
            }
        }
        Ok(TeacherImageEmbedding(normalized(&base)))
    }
}

impl TextEncoder for SyntheticTeacher {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.is_empty() {
            return Err(Error::InvalidConfig("cannot encode empty text".into()));
        }
        let v = match self.split_template(text) {
            Some((tpl, concept)) => {
                let c = self.raw(concept);
                let t = self.raw(tpl);
                let c = normalized(&c);
                let t = normalized(&t);
                c.iter()
                    .zip(&t)
                    .map(|(a, b)| *a as f64 + self.cfg.template_weight * *b as f64)
                    .collect::<Vec<_>>()
            }
            None => self.raw(text),
        };
        Ok(normalized(&v))
    }
}

/// Softmax of `e · W_tgt`; the temperature lives in the scaled columns.
pub fn target_distribution(
    embedding: &TeacherImageEmbedding,
    weights: &ConceptWeightMatrix,
) -> Result<TargetDistribution> {
    let logits = weights.logits(&embedding.0)?;
    Ok(TargetDistribution(softmax(&logits)))
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

/// Identifies a shapes-world object in a masked crop by its palette color and
/// silhouette. Returns `None` for anything that does not look like one.
pub fn recognize_shapes_world(crop: &RgbImage) -> Option<String> {
    let (w, h) = (crop.width() as usize, crop.height() as usize);
    let fg = Mask::from_fn(w, h, |x, y| crop.get_pixel(x as u32, y as u32).0 != [0, 0, 0]);
    let bbox = fg.bbox()?;
    let pts = fg.foreground();
    let n = pts.len() as f64;
    let mut mean = [0f64; 3];
    let mut cy = 0f64;
    for &(x, y) in &pts {
        let p = crop.get_pixel(x as u32, y as u32).0;
        for c in 0..3 {
            mean[c] += p[c] as f64 / n;
        }
        cy += y as f64 / n;
    }
    let color = Color::nearest(mean, 60.0)?;
    let fill = n / (bbox.width() * bbox.height()) as f64;
    let center_y = (bbox.y0 + bbox.y1) as f64 / 2.0;
    let (mx, my) = ((bbox.x0 + bbox.x1) / 2, (bbox.y0 + bbox.y1) / 2);
    let shape = if !fg.get(mx, my) {
        ShapeKind::Ring
    } else if (cy - center_y) / bbox.height() as f64 > 0.08 {
        ShapeKind::Triangle
    } else if fill > 0.9 {
        ShapeKind::Square
    } else if fill > 0.6 {
        ShapeKind::Circle
    } else {
        return None;
    };
    Some(format!("{} {}", color.name(), shape.name()))
}

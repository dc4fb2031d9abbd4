//! Shapes-world: colored geometric shapes on a noisy background, with exact
//! per-region masks, concept labels and templated captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BBox, Mask, Rgb, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    /// Closest palette entry within `max_dist` (Euclidean RGB distance).
    pub fn nearest(rgb: [f64; 3], max_dist: f64) -> Option<Color> {
        Self::ALL
            .iter()
            .map(|c| {
                let p = c.rgb();
                let d = (0..3).map(|i| (p[i] as f64 - rgb[i]).powi(2)).sum::<f64>().sqrt();
                (d, *c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .filter(|(d, _)| *d <= max_dist)
            .map(|(_, c)| c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether pixel `(x, y)` is inside a shape of side `s` anchored at
    /// `(x0, y0)`; coordinates are pixel centers.
    fn contains(self, x0: usize, y0: usize, s: usize, x: usize, y: usize) -> bool {
        let fx = x as f64 + 0.5 - x0 as f64;
        let fy = y as f64 + 0.5 - y0 as f64;
        let s = s as f64;
        if fx < 0.0 || fy < 0.0 || fx > s || fy > s {
            return false;
        }
        let r = s / 2.0;
        let d2 = (fx - r).powi(2) + (fy - r).powi(2);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => d2 <= r * r,
            ShapeKind::Ring => d2 <= r * r && d2 >= (r * 0.5).powi(2),
            // Apex at top center, base along the bottom edge.
            ShapeKind::Triangle => (fx - r).abs() <= fy / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub color: Color,
    pub shape: ShapeKind,
}

impl ConceptSpec {
    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

/// The first `k` concepts: three shapes while `k ≤ 18`, otherwise four,
/// crossed with as many palette colors as needed, color-major.
pub fn concept_specs(k: usize) -> Result<Vec<ConceptSpec>> {
    let max = Color::ALL.len() * ShapeKind::ALL.len();
    if k == 0 || k > max {
        return Err(Error::InvalidConfig(format!(
            "shapes-world supports 1..={max} concepts, got {k}"
        )));
    }
    let n_shapes = if k <= 18 { 3 } else { 4 };
    let n_colors = k.div_ceil(n_shapes);
    let mut out = Vec::with_capacity(k);
    for color in &Color::ALL[..n_colors] {
        for shape in &ShapeKind::ALL[..n_shapes] {
            if out.len() < k {
                out.push(ConceptSpec {
                    color: *color,
                    shape: *shape,
                });
            }
        }
    }
    Ok(out)
}

pub fn position_phrase(cx: f64, cy: f64) -> &'static str {
    if (cx - 0.5).abs() < 0.15 && (cy - 0.5).abs() < 0.15 {
        return "center";
    }
    match (cx < 0.5, cy < 0.5) {
        (true, true) => "top left",
        (false, true) => "top right",
        (true, false) => "bottom left",
        (false, false) => "bottom right",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_concepts: usize,
    pub seed: u64,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub min_area: usize,
    /// First image index; lets a held-out split share the id space.
    pub first_index: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 2000,
            num_concepts: 12,
            seed: 0,
            image_size: 128,
            min_shapes: 1,
            max_shapes: 6,
            min_side: 16,
            max_side: 40,
            min_area: 64,
            first_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub mask: Mask,
    pub concept: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image: RgbImage,
    pub regions: Vec<Region>,
}

pub fn image_id(index: usize) -> String {
    format!("img{index:07}")
}

pub fn region_id(image_index: usize, region: usize) -> String {
    format!("img{image_index:07}-r{region}")
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
    if cfg.min_shapes == 0 || cfg.min_shapes > cfg.max_shapes {
        return bad("shape count range is empty");
    }
    if cfg.min_side < 4 || cfg.min_side > cfg.max_side || cfg.max_side >= cfg.image_size {
        return bad("shape side range does not fit the image");
    }
    // A triangle covers roughly half of its bounding square.
    if cfg.min_side * cfg.min_side / 2 < cfg.min_area {
        return bad("min_side too small for min_area");
    }
    concept_specs(cfg.num_concepts).map(|_| ())
}

/// Generates `cfg.num_images` images. Each image draws its shape count,
/// placements (non-overlapping, 2-pixel gap) and concepts from a ChaCha8
/// stream seeded by `(seed, image index)`, so any image can be regenerated
/// independently.
pub fn generate_shapes_dataset(cfg: &SynthConfig) -> Result<Vec<ImageRecord>> {
    validate(cfg)?;
    let specs = concept_specs(cfg.num_concepts)?;
    (cfg.first_index..cfg.first_index + cfg.num_images)
        .map(|idx| generate_image(cfg, &specs, idx))
        .collect()
}

fn generate_image(cfg: &SynthConfig, specs: &[ConceptSpec], idx: usize) -> Result<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx as u64 + 1);
    let n = cfg.image_size;
    let base: u8 = rng.gen_range(20..90);
    let mut image = RgbImage::from_fn(n as u32, n as u32, |_, _| {
        let j = |rng: &mut ChaCha8Rng| base.saturating_add(rng.gen_range(0..12));
        Rgb([j(&mut rng), j(&mut rng), j(&mut rng)])
    });
    let want = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut regions = Vec::new();
    let mut attempts = 0;
    while regions.len() < want && attempts < 200 {
        attempts += 1;
        let side = rng.gen_range(cfg.min_side..=cfg.max_side);
        let x0 = rng.gen_range(0..n - side);
        let y0 = rng.gen_range(0..n - side);
        let spec = specs[rng.gen_range(0..specs.len())];
        let bb = BBox {
            x0,
            y0,
            x1: x0 + side - 1,
            y1: y0 + side - 1,
        };
        let clear = boxes.iter().all(|o| {
            bb.x1 + 2 < o.x0 || o.x1 + 2 < bb.x0 || bb.y1 + 2 < o.y0 || o.y1 + 2 < bb.y0
        });
        if !clear {
            continue;
        }
        let mask = Mask::from_fn(n, n, |x, y| spec.shape.contains(x0, y0, side, x, y));
        if mask.area() < cfg.min_area {
            continue;
        }
        let rgb = spec.color.rgb();
        for (x, y) in mask.foreground() {
            let mut c = [0u8; 3];
            for ch in 0..3 {
                let jitter: i16 = rng.gen_range(-8..=8);
                c[ch] = (rgb[ch] as i16 + jitter).clamp(1, 255) as u8;
            }
            image.put_pixel(x as u32, y as u32, Rgb(c));
        }
        let pts = mask.foreground();
        let cx = pts.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / pts.len() as f64 / n as f64;
        let cy = pts.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / pts.len() as f64 / n as f64;
        let concept = spec.name();
        let caption = format!("a {concept} in the {}", position_phrase(cx, cy));
        regions.push(Region {
            region_id: region_id(idx, regions.len()),
            mask,
            concept,
            caption,
        });
        boxes.push(bb);
    }
    if regions.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "could not place any shape in image {idx}"
        )));
    }
    Ok(ImageRecord {
        image_id: image_id(idx),
        image,
        regions,
    })
}

//! Prompt sampling for training (two stages) and deterministic inference.
//!
//! Points are emitted at pixel centers, normalized by image width/height:
//! pixel `(px, py)` becomes `((px + 0.5) / w, (py + 0.5) / h)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Upper bound on non-corner points in one prompt set.
pub const MAX_POINTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "box_tl")]
    BoxTopLeft,
    #[serde(rename = "box_br")]
    BoxBottomRight,
}

impl PointLabel {
    /// Row of the label embedding table.
    pub fn index(self) -> usize {
        match self {
            PointLabel::Positive => 0,
            PointLabel::Negative => 1,
            PointLabel::BoxTopLeft => 2,
            PointLabel::BoxBottomRight => 3,
        }
    }

    pub fn is_corner(self) -> bool {
        matches!(self, PointLabel::BoxTopLeft | PointLabel::BoxBottomRight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f32,
    pub y: f32,
    pub label: PointLabel,
}

impl PromptPoint {
    pub fn at_pixel(px: usize, py: usize, width: usize, height: usize, label: PointLabel) -> Self {
        Self {
            x: ((px as f64 + 0.5) / width as f64) as f32,
            y: ((py as f64 + 0.5) / height as f64) as f32,
            label,
        }
    }

    /// Pixel containing this point.
    pub fn pixel(&self, width: usize, height: usize) -> (usize, usize) {
        let px = ((self.x as f64 * width as f64).floor() as usize).min(width - 1);
        let py = ((self.y as f64 * height as f64).floor() as usize).min(height - 1);
        (px, py)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Points,
    Sketch,
}

/// Ordered labeled points. A box is exactly one corner pair; point and
/// sketch sets hold 1–9 non-corner points and may keep the corner pair of a
/// box they refine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub kind: PromptKind,
    pub points: Vec<PromptPoint>,
}

impl PromptSet {
    pub fn new(kind: PromptKind, points: Vec<PromptPoint>) -> Result<Self> {
        let s = Self { kind, points };
        s.validate()?;
        Ok(s)
    }

    /// The "nothing left to correct" marker returned by interactive sampling.
    pub fn empty() -> Self {
        Self {
            kind: PromptKind::Points,
            points: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPrompt(m));
        for p in &self.points {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) || !p.x.is_finite() || !p.y.is_finite() {
                return bad(format!("coordinates ({}, {}) outside [0, 1]", p.x, p.y));
            }
        }
        let tl = self.points.iter().filter(|p| p.label == PointLabel::BoxTopLeft).count();
        let br = self.points.iter().filter(|p| p.label == PointLabel::BoxBottomRight).count();
        if tl != br || tl > 1 {
            return bad("box corners must come as exactly one top-left/bottom-right pair".into());
        }
        if tl == 1 {
            let a = self.points.iter().find(|p| p.label == PointLabel::BoxTopLeft).unwrap();
            let b = self.points.iter().find(|p| p.label == PointLabel::BoxBottomRight).unwrap();
            if a.x > b.x || a.y > b.y {
                return bad("box top-left corner lies below/right of bottom-right corner".into());
            }
        }
        let loose = self.points.len() - 2 * tl;
        match self.kind {
            PromptKind::Box if tl != 1 || loose != 0 => {
                bad("box prompt must contain exactly the two corner points".into())
            }
            PromptKind::Points | PromptKind::Sketch if !(1..=MAX_POINTS).contains(&loose) => bad(
                format!("{:?} prompt needs 1..={MAX_POINTS} non-corner points, got {loose}", self.kind),
            ),
            _ => Ok(()),
        }
    }

    /// Appends corrective points; the result routes as a point prompt.
    pub fn extended(&self, extra: &PromptSet) -> Result<PromptSet> {
        let mut points = self.points.clone();
        points.extend_from_slice(&extra.points);
        PromptSet::new(PromptKind::Points, points)
    }
}

pub fn box_prompt(mask: &Mask) -> Result<PromptSet> {
    let bb = mask
        .bbox()
        .ok_or_else(|| Error::DegenerateRegion("empty ground-truth mask".into()))?;
    let (w, h) = (mask.width(), mask.height());
    PromptSet::new(
        PromptKind::Box,
        vec![
            PromptPoint::at_pixel(bb.x0, bb.y0, w, h, PointLabel::BoxTopLeft),
            PromptPoint::at_pixel(bb.x1, bb.y1, w, h, PointLabel::BoxBottomRight),
        ],
    )
}

fn uniform_points(
    pixels: &[(usize, usize)],
    n: usize,
    mask: &Mask,
    rng: &mut impl Rng,
    label: impl Fn((usize, usize)) -> PointLabel,
) -> Vec<PromptPoint> {
    (0..n)
        .map(|_| {
            let px = pixels[rng.gen_range(0..pixels.len())];
            PromptPoint::at_pixel(px.0, px.1, mask.width(), mask.height(), label(px))
        })
        .collect()
}

/// First stage: the exact ground-truth box or one positive foreground point,
/// with equal probability.
pub fn sample_stage1(gt: &Mask, rng: &mut impl Rng) -> Result<PromptSet> {
    if gt.is_empty() {
        return Err(Error::DegenerateRegion("empty ground-truth mask".into()));
    }
    if rng.gen_bool(0.5) {
        box_prompt(gt)
    } else {
        let fg = gt.foreground();
        PromptSet::new(
            PromptKind::Points,
            uniform_points(&fg, 1, gt, rng, |_| PointLabel::Positive),
        )
    }
}

/// Corrective points from the error region: 1–8 pixels drawn uniformly (with
/// replacement) from the symmetric difference. Missed foreground becomes a
/// positive point, spurious foreground a negative one. An empty result means
/// the prediction already matches.
pub fn sample_interactive(pred: &Mask, gt: &Mask, rng: &mut impl Rng) -> Result<PromptSet> {
    let false_neg = gt.difference(pred)?;
    let false_pos = pred.difference(gt)?;
    let errors: Vec<(usize, usize)> = (0..gt.height())
        .flat_map(|y| (0..gt.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| false_neg.get(x, y) || false_pos.get(x, y))
        .collect();
    if errors.is_empty() {
        return Ok(PromptSet::empty());
    }
    let n = rng.gen_range(1..=8);
    PromptSet::new(
        PromptKind::Points,
        uniform_points(&errors, n, gt, rng, |(x, y)| {
            if false_neg.get(x, y) {
                PointLabel::Positive
            } else {
                PointLabel::Negative
            }
        }),
    )
}

/// Sketch-like prior: 1–9 positive points drawn uniformly from the mask.
pub fn sample_noninteractive(gt: &Mask, rng: &mut impl Rng) -> Result<PromptSet> {
    if gt.is_empty() {
        return Err(Error::DegenerateRegion("empty ground-truth mask".into()));
    }
    let n = rng.gen_range(1..=MAX_POINTS);
    let fg = gt.foreground();
    PromptSet::new(
        PromptKind::Sketch,
        uniform_points(&fg, n, gt, rng, |_| PointLabel::Positive),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Branch {
    Interactive,
    NonInteractive,
}

/// Second stage: with probability one half a fresh non-interactive set,
/// otherwise corrective points appended to the first-stage prompts. `None`
/// when the interactive branch finds no error to correct.
pub fn sample_stage2(
    stage1: &PromptSet,
    pred: &Mask,
    gt: &Mask,
    rng: &mut impl Rng,
) -> Result<(Stage2Branch, Option<PromptSet>)> {
    if rng.gen_bool(0.5) {
        return Ok((Stage2Branch::NonInteractive, Some(sample_noninteractive(gt, rng)?)));
    }
    let extra = sample_interactive(pred, gt, rng)?;
    if extra.is_empty() {
        return Ok((Stage2Branch::Interactive, None));
    }
    Ok((Stage2Branch::Interactive, Some(stage1.extended(&extra)?)))
}

/// `round(i · (m − 1) / 8)` for `i = 0..9`, rounding halves away from zero.
pub fn linspace_indices(m: usize) -> [usize; MAX_POINTS] {
    let steps = (MAX_POINTS - 1) as u64;
    std::array::from_fn(|i| {
        let num = i as u64 * (m as u64 - 1);
        ((2 * num + steps) / (2 * steps)) as usize
    })
}

/// Deterministic 9-point prompt from a mask or sketch: foreground pixels in
/// row-major order, picked at evenly spaced indices.
pub fn inference_points(region: &Mask) -> Result<PromptSet> {
    let fg = region.foreground();
    if fg.is_empty() {
        return Err(Error::DegenerateRegion("empty mask or sketch".into()));
    }
    let points = linspace_indices(fg.len())
        .iter()
        .map(|&i| {
            let (x, y) = fg[i];
            PromptPoint::at_pixel(x, y, region.width(), region.height(), PointLabel::Positive)
        })
        .collect();
    PromptSet::new(PromptKind::Sketch, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize, lo: usize, hi: usize) -> Mask {
        Mask::from_fn(n, n, |x, y| (lo..hi).contains(&x) && (lo..hi).contains(&y))
    }

    fn inside(m: &Mask, p: &PromptPoint) -> bool {
        let (x, y) = p.pixel(m.width(), m.height());
        m.get(x, y)
    }

    #[test]
    fn linspace_index_oracle() {
        // round(linspace(0, 99, 9)) worked by hand: 99/8 = 12.375.
        assert_eq!(linspace_indices(100), [0, 12, 25, 37, 50, 62, 74, 87, 99]);
        assert_eq!(linspace_indices(9), [0, 1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(linspace_indices(1), [0; 9]);
        // 0.5 rounds up: m = 3 → i·2/8 = 0.25·i
        assert_eq!(linspace_indices(3), [0, 0, 1, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn inference_points_single_pixel_repeats() {
        let m = Mask::from_fn(10, 10, |x, y| x == 3 && y == 4);
        let p = inference_points(&m).unwrap();
        assert_eq!(p.len(), 9);
        assert!(p.points.iter().all(|q| q.pixel(10, 10) == (3, 4)));
        assert!(inference_points(&Mask::new(4, 4)).is_err());
    }

    #[test]
    fn inference_points_nine_pixels_in_scan_order() {
        let m = Mask::from_fn(9, 9, |x, y| (x + y) % 4 == 0 && y < 4 && x < 9);
        let fg = m.foreground();
        assert!(fg.len() >= 9);
        let m = Mask::from_fn(9, 9, |x, y| fg[..9].contains(&(x, y)));
        let p = inference_points(&m).unwrap();
        let got: Vec<_> = p.points.iter().map(|q| q.pixel(9, 9)).collect();
        assert_eq!(got, fg[..9].to_vec());
        assert_eq!(inference_points(&m).unwrap(), p);
    }

    #[test]
    fn stage1_box_is_exact_bbox() {
        let gt = square(20, 4, 9);
        let b = box_prompt(&gt).unwrap();
        assert_eq!(b.points[0].pixel(20, 20), (4, 4));
        assert_eq!(b.points[1].pixel(20, 20), (8, 8));
    }

    #[test]
    fn single_pixel_point_branch() {
        let gt = Mask::from_fn(8, 8, |x, y| x == 2 && y == 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = sample_stage1(&gt, &mut rng).unwrap();
            if p.kind == PromptKind::Points {
                assert_eq!(p.points[0].pixel(8, 8), (2, 6));
            }
        }
    }

    #[test]
    fn interactive_converged_and_fn_only() {
        let gt = square(16, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_interactive(&gt, &gt, &mut rng).unwrap().is_empty());
        let empty = Mask::new(16, 16);
        for _ in 0..100 {
            let p = sample_interactive(&empty, &gt, &mut rng).unwrap();
            assert!((1..=8).contains(&p.len()));
            for q in &p.points {
                assert_eq!(q.label, PointLabel::Positive);
                assert!(inside(&gt, q));
            }
        }
    }

    #[test]
    fn interactive_labels_follow_error_type() {
        let gt = square(16, 0, 8);
        let pred = square(16, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            for q in sample_interactive(&pred, &gt, &mut rng).unwrap().points {
                let (x, y) = q.pixel(16, 16);
                match q.label {
                    PointLabel::Positive => assert!(gt.get(x, y) && !pred.get(x, y)),
                    PointLabel::Negative => assert!(pred.get(x, y) && !gt.get(x, y)),
                    _ => panic!("corner label from interactive sampling"),
                }
            }
        }
    }

    #[test]
    fn stage2_accumulates_onto_box() {
        let gt = square(16, 3, 10);
        let pred = Mask::new(16, 16);
        let s1 = box_prompt(&gt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = false;
        for _ in 0..40 {
            let (branch, s2) = sample_stage2(&s1, &pred, &gt, &mut rng).unwrap();
            let s2 = s2.unwrap();
            if branch == Stage2Branch::Interactive {
                assert_eq!(&s2.points[..2], &s1.points[..]);
                assert_eq!(s2.kind, PromptKind::Points);
                assert!(s2.len() <= 2 + 8);
                seen = true;
            } else {
                assert_eq!(s2.kind, PromptKind::Sketch);
            }
        }
        assert!(seen);
    }

    #[test]
    fn validation_rules() {
        let p = |x, y, label| PromptPoint { x, y, label };
        use PointLabel::*;
        assert!(PromptSet::new(PromptKind::Box, vec![p(0.1, 0.1, BoxTopLeft)]).is_err());
        assert!(PromptSet::new(PromptKind::Box, vec![p(0.5, 0.5, BoxTopLeft), p(0.1, 0.1, BoxBottomRight)]).is_err());
        assert!(PromptSet::new(PromptKind::Points, vec![p(1.2, 0.1, Positive)]).is_err());
        assert!(PromptSet::new(PromptKind::Points, vec![]).is_err());
        assert!(PromptSet::new(PromptKind::Points, vec![p(0.1, 0.1, Positive); 10]).is_err());
        assert!(PromptSet::new(PromptKind::Sketch, vec![p(0.1, 0.1, Negative); 9]).is_ok());
    }
}

//! Rasterization of the procedural shapes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{LabeledBox, Layout, NormBox, PixelRect};

/// Foreground categories in category-set order (label = index + 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle, ShapeKind::Star];

    pub fn label(self) -> usize {
        ShapeKind::ALL.iter().position(|&k| k == self).expect("listed") + 1
    }

    pub fn from_label(label: usize) -> Option<Self> {
        label.checked_sub(1).and_then(|i| ShapeKind::ALL.get(i).copied())
    }

    /// Circles and stars keep a square footprint.
    fn square(self) -> bool {
        matches!(self, ShapeKind::Circle | ShapeKind::Star)
    }

    /// Whether the point `(x, y)`, in pixel units with `(0, 0)` the top-left
    /// corner of the image, lies inside the shape drawn in `rect`.
    pub fn contains(self, rect: &PixelRect, x: f64, y: f64) -> bool {
        let (x0, y0) = (rect.c0 as f64, rect.r0 as f64);
        let (w, h) = (rect.width() as f64, rect.height() as f64);
        let (u, v) = ((x - x0) / w, (y - y0) / h);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self {
            ShapeKind::Rect => true,
            ShapeKind::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Triangle => (u - 0.5).abs() <= v / 2.0,
            ShapeKind::Star => in_polygon(&star_vertices(), u, v),
        }
    }
}

/// Five-pointed star in unit-box coordinates, first point up.
fn star_vertices() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 0.5 } else { 0.22 };
            let a = std::f64::consts::PI * (i as f64 / 5.0 - 0.5);
            (0.5 + r * a.cos(), 0.5 + r * a.sin() * 1.05 + 0.025)
        })
        .collect()
}

fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Binary `size×size` mask of a shape, sampled at pixel centres.
pub fn rasterize(kind: ShapeKind, rect: &PixelRect, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    for r in rect.r0..rect.r1.min(size) {
        for c in rect.c0..rect.c1.min(size) {
            out[r * size + c] = u8::from(kind.contains(rect, c as f64 + 0.5, r as f64 + 0.5));
        }
    }
    out
}

/// Tight bounding rect of the nonzero pixels, if any.
pub fn tight_rect(mask: &[u8], size: usize) -> Option<PixelRect> {
    let mut rect: Option<PixelRect> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v != 0) {
        let (r, c) = (i / size, i % size);
        rect = Some(match rect {
            None => PixelRect { r0: r, c0: c, r1: r + 1, c1: c + 1 },
            Some(p) => PixelRect { r0: p.r0.min(r), c0: p.c0.min(c), r1: p.r1.max(r + 1), c1: p.c1.max(c + 1) },
        });
    }
    rect
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// When false, boxes never intersect.
    pub allow_overlap: bool,
    /// Shape kinds to draw from.
    pub shapes: Vec<ShapeKind>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            resolution: 32,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.25,
            max_size: 0.6,
            allow_overlap: true,
            shapes: ShapeKind::ALL.to_vec(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.resolution < 8 {
            return Err(format!("resolution {} is too small", self.resolution));
        }
        if self.min_objects > self.max_objects {
            return Err("min_objects exceeds max_objects".into());
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err("sizes must satisfy 0 < min_size <= max_size <= 1".into());
        }
        if self.shapes.is_empty() {
            return Err("no shape kinds".into());
        }
        Ok(())
    }
}

/// One rendered image with its layout and amodal instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `R×R×3` RGB, row-major.
    pub image: Vec<u8>,
    /// Foreground boxes only, tight around each mask.
    pub layout: Layout,
    /// One binary `R×R` mask per foreground box.
    pub masks: Vec<Vec<u8>>,
}

const SHAPE_COLORS: [[u8; 3]; 8] = [
    [220, 50, 47],
    [38, 139, 210],
    [133, 153, 0],
    [211, 54, 130],
    [181, 137, 0],
    [42, 161, 152],
    [108, 113, 196],
    [240, 240, 240],
];

const BACKGROUND_COLORS: [[u8; 3]; 4] = [[70, 70, 80], [90, 80, 70], [60, 80, 75], [85, 85, 100]];

fn gradient_background(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let a = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
    let b = BACKGROUND_COLORS[rng.random_range(0..BACKGROUND_COLORS.len())];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![0u8; size * size * 3];
    for r in 0..size {
        for c in 0..size {
            let t = ((c as f64 / (size - 1) as f64 - 0.5) * dx + (r as f64 / (size - 1) as f64 - 0.5) * dy) / 2f64.sqrt()
                + 0.5;
            for ch in 0..3 {
                let v = a[ch] as f64 * (1.0 - t) + b[ch] as f64 * t;
                img[(r * size + c) * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn overlaps(a: &PixelRect, b: &PixelRect) -> bool {
    a.r0 < b.r1 && b.r0 < a.r1 && a.c0 < b.c1 && b.c0 < a.c1
}

/// Renders one sample from its own random stream. Later shapes occlude
/// earlier ones.
pub fn render_sample(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Sample {
    let size = cfg.resolution;
    let mut image = gradient_background(rng, size);
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let lo = ((cfg.min_size * size as f64).round() as usize).clamp(3, size);
    let hi = ((cfg.max_size * size as f64).round() as usize).clamp(lo, size);

    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    let mut rects: Vec<PixelRect> = Vec::new();
    for _ in 0..target {
        for _attempt in 0..64 {
            let kind = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
            let w = rng.random_range(lo..=hi);
            let h = if kind.square() { w } else { rng.random_range(lo..=hi) };
            let (r0, c0) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
            let color = SHAPE_COLORS[rng.random_range(0..SHAPE_COLORS.len())];
            let draw = PixelRect { r0, c0, r1: r0 + h, c1: c0 + w };
            let mask = rasterize(kind, &draw, size);
            let Some(tight) = tight_rect(&mask, size) else { continue };
            if !cfg.allow_overlap && rects.iter().any(|r| overlaps(r, &tight)) {
                continue;
            }
            for (i, _) in mask.iter().enumerate().filter(|(_, &v)| v != 0) {
                image[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
            let s = size as f64;
            let bbox = NormBox::new(tight.c0 as f64 / s, tight.r0 as f64 / s, tight.c1 as f64 / s, tight.r1 as f64 / s);
            boxes.push(LabeledBox::new(kind.label(), bbox));
            rects.push(tight);
            masks.push(mask);
            break;
        }
    }
    Sample { image, layout: Layout::new((size, size), boxes), masks }
}

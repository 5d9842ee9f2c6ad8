//! Layouts, categories, and style codes: the generator's conditional input.
//!
//! A [`Layout`] is an ordered list of labelled boxes in normalized `[0, 1]`
//! coordinates over a pixel lattice. Before synthesis a background instance
//! spanning the whole lattice is prepended ([`Layout::with_background`]), so
//! every pixel is covered by at least one instance. Each instance, including
//! the background, receives its own style code row.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::rng;

pub const BACKGROUND: usize = 0;
pub const DEFAULT_MAX_BOXES: usize = 8;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("malformed layout file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown category set `{0}`")]
    UnknownCategorySet(String),
    #[error("box {index}: unknown category `{name}`")]
    UnknownCategory { index: usize, name: String },
    #[error("background instance already present")]
    BackgroundPresent,
    #[error("invalid category set: {0}")]
    Categories(String),
    #[error("style: {0}")]
    Style(String),
    #[error("layout violations: {}", list(.0))]
    Invalid(Vec<Violation>),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Ordered category names; index 0 is always the background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    pub name: String,
    pub names: Vec<String>,
}

impl CategorySet {
    pub fn new(name: &str, names: &[&str]) -> Result<Self, LayoutError> {
        if names.first() != Some(&"background") {
            return Err(LayoutError::Categories("first category must be `background`".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(**n)) {
            return Err(LayoutError::Categories(format!("duplicate name `{dup}`")));
        }
        Ok(CategorySet {
            name: name.to_string(),
            names: names.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// The procedural shapes vocabulary.
    pub fn shapes() -> Self {
        Self::new("shapes", &["background", "circle", "rect", "triangle", "star"]).expect("valid set")
    }

    pub fn by_name(name: &str) -> Result<Self, LayoutError> {
        match name {
            "shapes" => Ok(Self::shapes()),
            other => Err(LayoutError::UnknownCategorySet(other.to_string())),
        }
    }

    /// Number of categories including background.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Box in normalized lattice coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl NormBox {
    pub const FULL: NormBox = NormBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        NormBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn intersection_area(&self, o: &NormBox) -> f64 {
        let w = self.x1.min(o.x1) - self.x0.max(o.x0);
        let h = self.y1.min(o.y1) - self.y0.max(o.y0);
        w.max(0.0) * h.max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub label: usize,
    pub bbox: NormBox,
    /// Detector confidence for boxes that were not annotated by hand.
    pub confidence: Option<f64>,
}

impl LabeledBox {
    pub fn new(label: usize, bbox: NormBox) -> Self {
        LabeledBox { label, bbox, confidence: None }
    }
}

/// Half-open integer rect `[r0, r1) × [c0, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct PixelRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PixelRect {
    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

fn axis_to_pixels(a: f64, b: f64, n: usize) -> (usize, usize) {
    let clampi = |v: f64| (v * n as f64).round().clamp(0.0, n as f64) as usize;
    let (mut lo, mut hi) = (clampi(a), clampi(b));
    if hi <= lo {
        hi = lo + 1;
        if hi > n {
            hi = n;
            lo = n - 1;
        }
    }
    (lo, hi)
}

/// Rounds a normalized box onto an `h×w` grid; every side is at least one
/// pixel so tiny boxes still touch a cell.
pub fn box_to_pixels(b: &NormBox, h: usize, w: usize) -> PixelRect {
    assert!(h >= 1 && w >= 1, "grid must be non-empty");
    let (r0, r1) = axis_to_pixels(b.y0, b.y1, h);
    let (c0, c1) = axis_to_pixels(b.x0, b.x1, w);
    PixelRect { r0, c0, r1, c1 }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// Box index, or `None` for layout-wide problems.
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "box {i}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// `(height, width)` in pixels.
    pub lattice: (usize, usize),
    pub boxes: Vec<LabeledBox>,
    background: bool,
}

impl Layout {
    pub fn new(lattice: (usize, usize), boxes: Vec<LabeledBox>) -> Self {
        Layout { lattice, boxes, background: false }
    }

    /// Number of foreground boxes.
    pub fn foreground_count(&self) -> usize {
        self.boxes.len() - usize::from(self.background)
    }

    pub fn has_background(&self) -> bool {
        self.background
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self, categories: &CategorySet, max_boxes: usize) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let mut bad = |index: Option<usize>, message: String| out.push(Violation { index, message });
        if self.lattice.0 == 0 || self.lattice.1 == 0 {
            bad(None, format!("empty lattice {:?}", self.lattice));
        }
        let m = self.foreground_count();
        if m > max_boxes {
            bad(None, format!("too many boxes: {m} > {max_boxes}"));
        }
        let skip = usize::from(self.background);
        for (i, b) in self.boxes.iter().enumerate().skip(skip) {
            let bx = &b.bbox;
            let coords = [bx.x0, bx.y0, bx.x1, bx.y1];
            if coords.iter().any(|v| !v.is_finite()) {
                bad(Some(i), "non-finite coordinate".into());
                continue;
            }
            if coords.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                bad(Some(i), format!("coordinates outside [0, 1]: {coords:?}"));
            }
            if bx.x1 <= bx.x0 || bx.y1 <= bx.y0 {
                bad(Some(i), "empty box".into());
            }
            if b.label >= categories.len() {
                bad(Some(i), format!("label out of range: {} >= {}", b.label, categories.len()));
            } else if b.label == BACKGROUND {
                bad(Some(i), "background label on a foreground box".into());
            }
            if let Some(p) = b.confidence {
                if !(0.0..=1.0).contains(&p) {
                    bad(Some(i), format!("confidence {p} outside [0, 1]"));
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// Prepends the full-lattice background instance.
    pub fn with_background(&self) -> Result<Layout, LayoutError> {
        if self.background {
            return Err(LayoutError::BackgroundPresent);
        }
        let mut boxes = Vec::with_capacity(self.boxes.len() + 1);
        boxes.push(LabeledBox::new(BACKGROUND, NormBox::FULL));
        boxes.extend_from_slice(&self.boxes);
        Ok(Layout { lattice: self.lattice, boxes, background: true })
    }

    /// Pixel rects of every instance on an `h×w` grid.
    pub fn rects(&self, h: usize, w: usize) -> Vec<PixelRect> {
        self.boxes.iter().map(|b| box_to_pixels(&b.bbox, h, w)).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.boxes.iter().map(|b| b.label).collect()
    }
}

/// Per-instance seeds from which style codes are drawn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSeeds {
    pub seed: u64,
    pub image: u64,
    /// One seed per instance, background first.
    pub instances: Vec<u64>,
}

impl StyleSeeds {
    /// Image seed is child 0 of `seed`; instance `i` is child `i + 1`.
    pub fn derive(seed: u64, instances: usize) -> Self {
        StyleSeeds {
            seed,
            image: rng::split(seed, 0),
            instances: (0..instances as u64).map(|i| rng::split(seed, i + 1)).collect(),
        }
    }

    /// Seeds from a layout file's style block for `instances` instances.
    pub fn from_spec(spec: &StyleSpec, instances: usize) -> Result<Self, LayoutError> {
        let mut seeds = Self::derive(spec.seed, instances);
        if let Some(explicit) = &spec.per_object_seeds {
            if explicit.len() != instances {
                return Err(LayoutError::Style(format!(
                    "per_object_seeds has {} entries, layout has {instances} instances (background first)",
                    explicit.len()
                )));
            }
            seeds.instances = explicit.clone();
        }
        Ok(seeds)
    }

    pub fn to_spec(&self) -> StyleSpec {
        StyleSpec { seed: self.seed, per_object_seeds: Some(self.instances.clone()) }
    }
}

/// Image and per-instance latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCodes {
    pub z_img: Vec<f64>,
    /// One row per instance, background first.
    pub z_obj: Vec<Vec<f64>>,
    pub seeds: StyleSeeds,
}

impl StyleCodes {
    pub fn sample(seeds: &StyleSeeds, d_img: usize, d_obj: usize) -> Self {
        StyleCodes {
            z_img: rng::gaussian(seeds.image, d_img),
            z_obj: seeds.instances.iter().map(|&s| rng::gaussian(s, d_obj)).collect(),
            seeds: seeds.clone(),
        }
    }

    /// Redraws instance `i` from `new_seed`, leaving every other row untouched.
    pub fn resample_instance(&mut self, i: usize, new_seed: u64) {
        let d = self.z_obj[i].len();
        self.seeds.instances[i] = new_seed;
        self.z_obj[i] = rng::gaussian(new_seed, d);
    }

    pub fn resample_image(&mut self, new_seed: u64) {
        self.seeds.image = new_seed;
        self.z_img = rng::gaussian(new_seed, self.z_img.len());
    }
}

/// Draws style codes for a layout that already includes its background.
pub fn sample_styles(layout: &Layout, d_img: usize, d_obj: usize, seed: u64) -> StyleCodes {
    assert!(layout.has_background(), "style codes are drawn after background insertion");
    StyleCodes::sample(&StyleSeeds::derive(seed, layout.boxes.len()), d_img, d_obj)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_object_seeds: Option<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxDoc {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    lattice: [usize; 2],
    categories: String,
    boxes: Vec<BoxDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style: Option<StyleSpec>,
}

/// Contents of a layout file.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutFile {
    pub categories: CategorySet,
    /// Foreground boxes only.
    pub layout: Layout,
    pub style: Option<StyleSpec>,
}

impl LayoutFile {
    pub fn parse(text: &str) -> Result<Self, LayoutError> {
        let doc: LayoutDoc = serde_json::from_str(text)?;
        Self::from_value_doc(doc)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, LayoutError> {
        Self::from_value_doc(serde_json::from_value(value)?)
    }

    fn from_value_doc(doc: LayoutDoc) -> Result<Self, LayoutError> {
        let categories = CategorySet::by_name(&doc.categories)?;
        let boxes = doc
            .boxes
            .into_iter()
            .enumerate()
            .map(|(index, b)| {
                let label = categories
                    .index_of(&b.label)
                    .ok_or(LayoutError::UnknownCategory { index, name: b.label })?;
                let [x0, y0, x1, y1] = b.bbox;
                Ok(LabeledBox { label, bbox: NormBox { x0, y0, x1, y1 }, confidence: b.confidence })
            })
            .collect::<Result<Vec<_>, LayoutError>>()?;
        Ok(LayoutFile {
            categories,
            layout: Layout::new((doc.lattice[0], doc.lattice[1]), boxes),
            style: doc.style,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let skip = usize::from(self.layout.has_background());
        let doc = LayoutDoc {
            lattice: [self.layout.lattice.0, self.layout.lattice.1],
            categories: self.categories.name.clone(),
            boxes: self.layout.boxes[skip..]
                .iter()
                .map(|b| BoxDoc {
                    label: self.categories.names[b.label].clone(),
                    bbox: [b.bbox.x0, b.bbox.y0, b.bbox.x1, b.bbox.y1],
                    confidence: b.confidence,
                })
                .collect(),
            style: self.style.clone(),
        };
        serde_json::to_value(doc).expect("layout serializes")
    }

    pub fn to_string_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("layout serializes")
    }
}

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::layout::{Layout, PixelRect, BACKGROUND};
use crate::nn::{conv, linear, Ctx, ParamStore};
use crate::tensor::{Element, Result, RoiRect, Tensor, Var};

use super::{config_error, stage_count};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Output width of each down-block followed by the image-head block.
    pub channels: Vec<usize>,
    /// Width of the per-object features.
    pub obj_channels: usize,
    /// Side of the RoIAlign grid.
    pub roi_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { resolution: 32, channels: vec![32, 64, 64, 64], obj_channels: 64, roi_size: 4 }
    }
}

/// Number of feature-pyramid levels read by the object head.
pub const PYRAMID_LEVELS: usize = 2;

impl DiscriminatorConfig {
    pub fn down_blocks(&self) -> Result<usize> {
        let n = stage_count(self.resolution)?;
        if self.channels.len() != n + 1 {
            return Err(config_error(format!(
                "discriminator needs {} channel widths for resolution {}, got {}",
                n + 1,
                self.resolution,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.obj_channels == 0 || self.roi_size == 0 {
            return Err(config_error("discriminator widths must be positive"));
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Element> {
    pub config: DiscriminatorConfig,
    pub num_labels: usize,
    pub params: ParamStore<T>,
}

fn add_resblock<T: Element>(p: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize) {
    p.add_conv(&format!("{prefix}.conv1"), c_in, c_out, 3);
    p.add_conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
    p.add_conv(&format!("{prefix}.skip"), c_in, c_out, 1);
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, num_labels: usize, seed: u64) -> Result<Self> {
        let n = config.down_blocks()?;
        let c = &config.channels;
        let mut p = ParamStore::new(seed);
        for k in 0..n {
            let c_in = if k == 0 { 3 } else { c[k - 1] };
            add_resblock(&mut p, &format!("disc.block{k}"), c_in, c[k]);
        }
        add_resblock(&mut p, "disc.head", c[n - 1], c[n]);
        p.add_linear("disc.img.fc", c[n], 1);
        for level in 0..PYRAMID_LEVELS {
            add_resblock(&mut p, &format!("disc.obj.level{level}"), c[level], config.obj_channels);
        }
        p.add_linear("disc.obj.fc", config.obj_channels, 1);
        p.add_embedding("disc.obj.embed", num_labels, config.obj_channels);
        Ok(Discriminator { config, num_labels, params: p })
    }
}

pub struct DiscOutput<'t, T: Element> {
    /// Image realness, one per sample.
    pub p_img: Var<'t, T>,
    /// Object realness for every foreground instance of the batch, in
    /// layout order; `None` when the batch has no foreground instance.
    pub p_obj: Option<Var<'t, T>>,
    /// Positions of each sample's instances within `p_obj`.
    pub obj_rows: Vec<Range<usize>>,
}

impl<T: Element> DiscOutput<'_, T> {
    pub fn object_scores(&self, sample: usize) -> Vec<f64> {
        match &self.p_obj {
            Some(p) => p.value().data()[self.obj_rows[sample].clone()].iter().map(|v| v.as_f64()).collect(),
            None => Vec::new(),
        }
    }
}

/// Pyramid level for a box given as a pixel rect on the `resolution` image.
/// Level 0 is the finest map; boxes grow toward `levels − 1`.
pub fn assign_pyramid_level(rect: &PixelRect, resolution: usize, levels: usize) -> usize {
    let top = levels.saturating_sub(1);
    let side = ((rect.height() * rect.width()) as f64).sqrt();
    let raw = (side / resolution as f64 * (1u64 << top) as f64).log2().floor();
    raw.clamp(0.0, top as f64) as usize
}

/// Residual block without resolution change: `relu → conv → relu → conv`
/// plus a 1×1 skip.
fn resblock<'t, T: Element>(ctx: &Ctx<'t, '_, T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let h = conv(ctx, &format!("{prefix}.conv1"), &x.relu())?;
    let h = conv(ctx, &format!("{prefix}.conv2"), &h.relu())?;
    h.add(&conv(ctx, &format!("{prefix}.skip"), x)?)
}

fn down_block<'t, T: Element>(ctx: &Ctx<'t, '_, T>, prefix: &str, x: &Var<'t, T>, first: bool) -> Result<Var<'t, T>> {
    if first {
        let h = conv(ctx, &format!("{prefix}.conv1"), x)?.relu();
        let h = conv(ctx, &format!("{prefix}.conv2"), &h)?.avg_pool2()?;
        h.add(&conv(ctx, &format!("{prefix}.skip"), &x.avg_pool2()?)?)
    } else {
        resblock(ctx, prefix, x)?.avg_pool2()
    }
}

fn row_sum<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let cols = x.shape()[1];
    x.matmul(&x.tape().constant(Tensor::ones(&[cols, 1])))
}

/// Scores a batch of images against their layouts. The background instance,
/// if present, is scored only through the image head.
pub fn discriminator_forward<'t, T: Element>(
    ctx: &Ctx<'t, '_, T>,
    cfg: &DiscriminatorConfig,
    images: &Var<'t, T>,
    layouts: &[Layout],
) -> Result<DiscOutput<'t, T>> {
    let blocks = cfg.down_blocks()?;
    let r = cfg.resolution;
    let s = images.shape();
    if s != [layouts.len(), 3, r, r] {
        return Err(config_error(format!("expected {} images of 3×{r}×{r}, got {s:?}", layouts.len())));
    }

    let mut h = *images;
    let mut pyramid = Vec::with_capacity(PYRAMID_LEVELS);
    for k in 0..blocks {
        h = down_block(ctx, &format!("disc.block{k}"), &h, k == 0)?;
        if k < PYRAMID_LEVELS {
            pyramid.push(h);
        }
    }
    let pooled = resblock(ctx, "disc.head", &h)?.relu().spatial_mean()?;
    let p_img = linear(ctx, "disc.img.fc", &pooled)?.reshape(&[layouts.len()])?;

    let mut per_level: Vec<Vec<(usize, RoiRect)>> = vec![Vec::new(); PYRAMID_LEVELS];
    let mut slot = Vec::new();
    let mut labels = Vec::new();
    let mut obj_rows = Vec::with_capacity(layouts.len());
    for (n, l) in layouts.iter().enumerate() {
        let start = labels.len();
        for b in l.boxes.iter().filter(|b| b.label != BACKGROUND) {
            let level = assign_pyramid_level(&crate::layout::box_to_pixels(&b.bbox, r, r), r, PYRAMID_LEVELS);
            let side = pyramid[level].shape()[3] as f64;
            let bb = &b.bbox;
            per_level[level].push((n, RoiRect { x0: bb.x0 * side, y0: bb.y0 * side, x1: bb.x1 * side, y1: bb.y1 * side }));
            slot.push((level, per_level[level].len() - 1));
            labels.push(b.label);
        }
        obj_rows.push(start..labels.len());
    }
    if labels.is_empty() {
        return Ok(DiscOutput { p_img, p_obj: None, obj_rows });
    }

    let mut feats = Vec::new();
    let mut offsets = Vec::new();
    let mut total = 0;
    for (level, rois) in per_level.iter().enumerate() {
        offsets.push(total);
        if rois.is_empty() {
            continue;
        }
        let pooled = pyramid[level].roi_align(rois, cfg.roi_size)?;
        let f = resblock(ctx, &format!("disc.obj.level{level}"), &pooled)?.relu().spatial_mean()?;
        feats.push(f);
        total += rois.len();
    }
    let order: Vec<usize> = slot.iter().map(|&(level, i)| offsets[level] + i).collect();
    let f = Var::concat(&feats, 0)?.gather_rows(&order)?;
    let realness = linear(ctx, "disc.obj.fc", &f)?;
    let projection = row_sum(&ctx.param("disc.obj.embed").gather_rows(&labels)?.mul(&f)?)?;
    let p_obj = realness.add(&projection)?.reshape(&[labels.len()])?;
    Ok(DiscOutput { p_img, p_obj: Some(p_obj), obj_rows })
}

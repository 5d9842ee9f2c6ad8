use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::isla::{
    add_isla_params, argmax_map, embed_labels, isla_layer, joint_encode, place_masks, select_feature_masks, to_mask,
    MaskGenerator, StageInstances,
};
use crate::layout::{Layout, StyleCodes};
use crate::nn::{conv, linear, Ctx, ParamStore};
use crate::tensor::{Element, Result, Tensor, Var};

use super::{config_error, stage_count};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output side length `R`.
    pub resolution: usize,
    /// Feature widths: the 4×4 input and the output of each up-block.
    pub channels: Vec<usize>,
    pub d_img: usize,
    /// Label embedding width.
    pub d_embed: usize,
    pub d_obj: usize,
    /// Side of the generated instance masks before placement.
    pub mask_size: usize,
    pub mask_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 32,
            channels: vec![64, 64, 32, 16],
            d_img: 128,
            d_embed: 128,
            d_obj: 128,
            mask_size: 32,
            mask_channels: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn stages(&self) -> Result<usize> {
        let stages = stage_count(self.resolution)?;
        if self.channels.len() != stages + 1 {
            return Err(config_error(format!(
                "generator needs {} channel widths for resolution {}, got {}",
                stages + 1,
                self.resolution,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.mask_size == 0 || self.mask_channels == 0 {
            return Err(config_error("generator widths must be positive"));
        }
        Ok(stages)
    }
}

/// Generator parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Element> {
    pub config: GeneratorConfig,
    pub num_labels: usize,
    pub params: ParamStore<T>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: GeneratorConfig, num_labels: usize, seed: u64) -> Result<Self> {
        let stages = config.stages()?;
        let c = &config.channels;
        let d_joint = config.d_embed + config.d_obj;
        let mut p = ParamStore::new(seed);
        p.add_embedding("gen.embed", num_labels, config.d_embed);
        p.add_linear("gen.fc", config.d_img, 16 * c[0]);
        MaskGenerator::add_params(&mut p, "gen.mask", d_joint, config.mask_channels);
        for k in 0..stages {
            p.add_conv(&format!("gen.isla.{k}.tomask"), c[k], num_labels, 3);
            add_isla_params(&mut p, &format!("gen.isla.{k}.norm1"), d_joint, c[k]);
            add_isla_params(&mut p, &format!("gen.isla.{k}.norm2"), d_joint, c[k + 1]);
            p.add_conv(&format!("gen.block{k}.conv1"), c[k], c[k + 1], 3);
            p.add_conv(&format!("gen.block{k}.conv2"), c[k + 1], c[k + 1], 3);
            p.add_conv(&format!("gen.block{k}.skip"), c[k], c[k + 1], 1);
        }
        p.add_conv("gen.rgb", c[stages], 3, 3);
        Ok(Generator { config, num_labels, params: p })
    }
}

/// Plain values from one synthesized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis<T> {
    /// `3×R×R` in `[−1, 1]`.
    pub image: Tensor<T>,
    /// Final blended instance masks, `m'×R×R`, background first.
    pub masks: Tensor<T>,
    /// Generated masks before placement, `m'×s×s`.
    pub generated: Tensor<T>,
    /// Category per pixel, row-major `R×R`.
    pub label_map: Vec<usize>,
}

impl<T: Element> Generator<T> {
    /// Forward pass for a single layout (with background) using frozen
    /// parameters.
    pub fn synthesize(&self, layout: &Layout, styles: &StyleCodes, opts: &GenOptions) -> Result<Synthesis<T>> {
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::new(&tape, &self.params, false);
        let out = generator_forward(&ctx, &self.config, std::slice::from_ref(layout), std::slice::from_ref(styles), opts)?;
        let r = self.config.resolution;
        Ok(Synthesis {
            image: (*out.image.value()).clone().reshape(&[3, r, r])?,
            masks: (*out.masks[0].value()).clone(),
            generated: (*out.generated_masks[0].value()).clone(),
            label_map: out.label_image(0),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenOptions {
    /// Replaces every learned blend weight `α` with this constant.
    pub alpha_override: Option<f64>,
}

pub struct GenOutput<'t, T: Element> {
    /// `N×3×R×R` in `[−1, 1]`.
    pub image: Var<'t, T>,
    /// `N×d_ℓ×H×H` sigmoid maps at 4, 8, …, R.
    pub label_maps: Vec<Var<'t, T>>,
    /// Per sample, the blended instance masks of the last layer, `m'×R×R`.
    pub masks: Vec<Var<'t, T>>,
    /// Per sample, the generated `s×s` masks before placement.
    pub generated_masks: Vec<Var<'t, T>>,
    /// Per sample, the generated masks placed at resolution `R`.
    pub placed_masks: Vec<Var<'t, T>>,
    pub labels: Vec<Vec<usize>>,
}

impl<T: Element> GenOutput<'_, T> {
    /// Category index per pixel: the label of the instance whose final mask
    /// is largest there.
    pub fn label_image(&self, sample: usize) -> Vec<usize> {
        argmax_map(&self.masks[sample].value())
            .into_iter()
            .map(|i| self.labels[sample][i])
            .collect()
    }
}

fn check_inputs(cfg: &GeneratorConfig, layouts: &[Layout], styles: &[StyleCodes]) -> Result<()> {
    if layouts.is_empty() || layouts.len() != styles.len() {
        return Err(config_error(format!("{} layouts but {} style sets", layouts.len(), styles.len())));
    }
    for (i, (l, s)) in layouts.iter().zip(styles).enumerate() {
        if !l.has_background() {
            return Err(config_error(format!("sample {i}: layout lacks its background instance")));
        }
        if s.z_obj.len() != l.boxes.len() || s.z_img.len() != cfg.d_img || s.z_obj.iter().any(|r| r.len() != cfg.d_obj) {
            return Err(config_error(format!("sample {i}: style codes do not match the layout or dimensions")));
        }
    }
    Ok(())
}

fn stage_instances<'t, T: Element>(
    generated: &[Var<'t, T>],
    label_map: &Var<'t, T>,
    layouts: &[Layout],
    rows: &[Range<usize>],
    res: usize,
) -> Result<Vec<StageInstances<'t, T>>> {
    layouts
        .iter()
        .enumerate()
        .map(|(n, l)| {
            let rects = l.rects(res, res);
            Ok(StageInstances {
                generated: place_masks(&generated[n], &rects, res, res)?,
                from_features: select_feature_masks(&label_map.slice(0, n, 1)?, &l.labels(), &rects)?,
                rects,
                rows: rows[n].clone(),
            })
        })
        .collect()
}

/// Synthesizes a batch of images from layouts (with background) and style
/// codes. Each up-block runs
/// `ISLA → relu → up×2 → conv3×3 → ISLA → relu → conv3×3` plus an
/// `up×2 → conv1×1` skip path.
pub fn generator_forward<'t, T: Element>(
    ctx: &Ctx<'t, '_, T>,
    cfg: &GeneratorConfig,
    layouts: &[Layout],
    styles: &[StyleCodes],
    opts: &GenOptions,
) -> Result<GenOutput<'t, T>> {
    let stages = cfg.stages()?;
    check_inputs(cfg, layouts, styles)?;
    let tape = ctx.tape();
    let n = layouts.len();

    let z_img: Vec<f64> = styles.iter().flat_map(|s| s.z_img.iter().copied()).collect();
    let z_img = tape.constant(Tensor::from_f64(&[n, cfg.d_img], &z_img)?);
    let mut h = linear(ctx, "gen.fc", &z_img)?.reshape(&[n, cfg.channels[0], 4, 4])?;

    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for l in layouts {
        let start = labels.len();
        labels.extend(l.labels());
        rows.push(start..labels.len());
    }
    let z_obj: Vec<f64> = styles.iter().flat_map(|s| s.z_obj.iter().flatten().copied()).collect();
    let z_obj = tape.constant(Tensor::from_f64(&[labels.len(), cfg.d_obj], &z_obj)?);
    let encoding = joint_encode(&embed_labels(&ctx.param("gen.embed"), &labels)?, &z_obj)?;
    let all_masks = MaskGenerator::forward(ctx, "gen.mask", &encoding, cfg.mask_size)?;
    let generated = rows
        .iter()
        .map(|r| all_masks.slice(0, r.start, r.len()))
        .collect::<Result<Vec<_>>>()?;

    let mut label_maps = Vec::with_capacity(stages + 1);
    let mut masks = Vec::new();
    let mut placed = Vec::new();
    for k in 0..stages {
        let res = 4 << k;
        let isla = format!("gen.isla.{k}");
        let block = format!("gen.block{k}");

        let fmap = to_mask(ctx, &format!("{isla}.tomask"), &h)?;
        let first = stage_instances(&generated, &fmap, layouts, &rows, res)?;
        let (a, _) = isla_layer(ctx, &format!("{isla}.norm1"), &h, &encoding, &first, opts.alpha_override)?;
        let a = conv(ctx, &format!("{block}.conv1"), &a.relu().upsample2()?)?;

        let fmap_up = fmap.upsample2()?;
        let second = stage_instances(&generated, &fmap_up, layouts, &rows, 2 * res)?;
        let (b, blended) = isla_layer(ctx, &format!("{isla}.norm2"), &a, &encoding, &second, opts.alpha_override)?;
        let b = conv(ctx, &format!("{block}.conv2"), &b.relu())?;

        let skip = conv(ctx, &format!("{block}.skip"), &h.upsample2()?)?;
        h = b.add(&skip)?;
        label_maps.push(fmap);
        if k + 1 == stages {
            label_maps.push(fmap_up);
            masks = blended;
            placed = second.into_iter().map(|s| s.generated).collect();
        }
    }
    let image = conv(ctx, "gen.rgb", &h.relu())?.tanh();
    Ok(GenOutput {
        image,
        label_maps,
        masks,
        generated_masks: generated,
        placed_masks: placed,
        labels: layouts.iter().map(|l| l.labels()).collect(),
    })
}

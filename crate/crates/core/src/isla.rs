//! Instance-sensitive, layout-aware normalization.
//!
//! Features are batch-standardized per channel and then recalibrated with
//! per-pixel scale (`γ`) and shift (`β`) fields. Each instance contributes a
//! row of an affine table (its label embedding and style code projected to
//! `2C` values), spread over the image by a soft instance mask:
//!
//! ```text
//! γ[c, p] = Σᵢ M[i, p] · T_γ[i, c] / D[p]
//! D[p]    = Σᵢ M[i, p]  where two or more boxes cover p, otherwise 1
//! ```
//!
//! The instance masks blend two sources with a learned weight `α`: masks
//! generated from the joint label/style encoding and placed into each box,
//! and masks read out of the current feature map by a per-stage `ToMask`
//! head, clipped to each box.

use crate::layout::PixelRect;
use crate::nn::{conv, linear, Ctx, ParamStore};
use crate::tensor::{Element, Result, Tensor, TensorError, Var};

/// Floor applied to the normalizer `D` so overlapping near-zero masks cannot
/// divide by zero.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Number of boxes covering each pixel of an `h×w` grid.
pub fn occupancy(rects: &[PixelRect], h: usize, w: usize) -> Vec<u32> {
    let mut occ = vec![0u32; h * w];
    for r in rects {
        for row in r.r0..r.r1 {
            for col in r.c0..r.c1 {
                occ[row * w + col] += 1;
            }
        }
    }
    occ
}

/// `m'×(h·w)` indicator of each instance's pixel rect.
pub fn box_indicator<T: Element>(rects: &[PixelRect], h: usize, w: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rects.len(), h * w]);
    for (i, r) in rects.iter().enumerate() {
        for row in r.r0..r.r1 {
            for col in r.c0..r.c1 {
                t.data_mut()[i * h * w + row * w + col] = T::one();
            }
        }
    }
    t
}

/// Rows `labels[i]` of the embedding table `W` (`d_ℓ×d_e`), i.e. `Y·W` for
/// the one-hot label matrix `Y`.
pub fn embed_labels<'t, T: Element>(table: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    table.gather_rows(labels)
}

/// `[Y, Z]`: label embeddings followed by style codes, one row per instance.
pub fn joint_encode<'t, T: Element>(embedding: &Var<'t, T>, z_obj: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (e, z) = (embedding.shape(), z_obj.shape());
    if e.len() != 2 || z.len() != 2 || e[0] != z[0] {
        return Err(TensorError::ShapeMismatch { op: "joint_encode", lhs: e, rhs: z });
    }
    Var::concat(&[*embedding, *z_obj], 1)
}

/// Small generator turning each joint-encoding row into an `s×s` soft mask.
///
/// Rows are processed independently: FC to `4×4×c₀`, two rounds of
/// (2× upsample, 3×3 conv, relu), a one-channel 3×3 conv and a sigmoid, then
/// a bilinear resize from 16×16 to `s×s`.
pub struct MaskGenerator;

impl MaskGenerator {
    pub fn add_params<T: Element>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, c0: usize) {
        store.add_linear(&format!("{prefix}.fc"), d_in, 16 * c0);
        store.add_conv(&format!("{prefix}.conv1"), c0, c0, 3);
        store.add_conv(&format!("{prefix}.conv2"), c0, c0, 3);
        store.add_conv(&format!("{prefix}.out"), c0, 1, 3);
    }

    /// `n×d` encodings to `n×s×s` masks in `(0, 1)`.
    pub fn forward<'t, T: Element>(
        ctx: &Ctx<'t, '_, T>,
        prefix: &str,
        s: &Var<'t, T>,
        size: usize,
    ) -> Result<Var<'t, T>> {
        let n = s.shape()[0];
        let h = linear(ctx, &format!("{prefix}.fc"), s)?;
        let c0 = h.shape()[1] / 16;
        let mut h = h.reshape(&[n, c0, 4, 4])?;
        for name in ["conv1", "conv2"] {
            h = conv(ctx, &format!("{prefix}.{name}"), &h.upsample2()?)?.relu();
        }
        let m = conv(ctx, &format!("{prefix}.out"), &h)?.sigmoid();
        let m = if size == 16 { m } else { m.bilinear_resize(size, size, false)? };
        m.reshape(&[n, size, size])
    }
}

/// Resizes each `s×s` mask to its instance's pixel rect and writes it into a
/// zero `h×w` canvas, giving `n×h×w`.
pub fn place_masks<'t, T: Element>(
    masks: &Var<'t, T>,
    rects: &[PixelRect],
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    let s = masks.shape();
    if s.len() != 3 || s[0] != rects.len() {
        return Err(crate::tensor::TensorError::Invalid {
            op: "place_masks",
            msg: format!("{} rects for masks of shape {s:?}", rects.len()),
        });
    }
    let parts = rects
        .iter()
        .enumerate()
        .map(|(i, r)| {
            masks
                .slice(0, i, 1)?
                .bilinear_resize(r.height(), r.width(), false)?
                .place(h, w, r.r0, r.c0)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&parts, 0)
}

/// `ToMask` head: 3×3 conv to `d_ℓ` channels and a sigmoid, `N×d_ℓ×H×W`.
pub fn to_mask<'t, T: Element>(ctx: &Ctx<'t, '_, T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(conv(ctx, prefix, x)?.sigmoid())
}

/// Instance masks read from one sample's `d_ℓ×H×W` label map: instance `i`
/// takes channel `labels[i]` and is zeroed outside its rect.
pub fn select_feature_masks<'t, T: Element>(
    label_map: &Var<'t, T>,
    labels: &[usize],
    rects: &[PixelRect],
) -> Result<Var<'t, T>> {
    let s = label_map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let d = label_map.value().len() / (h * w);
    label_map
        .reshape(&[d, h * w])?
        .gather_rows(labels)?
        .mul_const(&box_indicator(rects, h, w))?
        .reshape(&[labels.len(), h, w])
}

/// `T = S·A`, split column-wise into `(T_β, T_γ)`, each `m'×C`.
pub fn affine_table<'t, T: Element>(s: &Var<'t, T>, a: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let t = s.matmul(a)?;
    let two_c = t.shape()[1];
    if two_c % 2 != 0 {
        return Err(crate::tensor::TensorError::Invalid {
            op: "affine_table",
            msg: format!("projection width {two_c} is odd"),
        });
    }
    let c = two_c / 2;
    Ok((t.slice(1, 0, c)?, t.slice(1, c, c)?))
}

/// `(1 − α)·M_S + α·M_F`.
pub fn blend_masks<'t, T: Element>(ms: &Var<'t, T>, mf: &Var<'t, T>, alpha: &Var<'t, T>) -> Result<Var<'t, T>> {
    if ms.shape() != mf.shape() {
        return Err(TensorError::ShapeMismatch { op: "blend_masks", lhs: ms.shape(), rhs: mf.shape() });
    }
    ms.mul(&alpha.neg().add_scalar(1.0))?.add(&mf.mul(alpha)?)
}

/// Per-pixel `(γ, β)` fields, each `C×H×W`, from blended masks `m'×H×W`
/// and the affine table.
pub fn compose_isla<'t, T: Element>(
    masks: &Var<'t, T>,
    t_gamma: &Var<'t, T>,
    t_beta: &Var<'t, T>,
    rects: &[PixelRect],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = masks.shape();
    let (m, h, w) = (s[0], s[1], s[2]);
    let c = t_gamma.shape()[1];
    let tape = masks.tape();
    let flat = masks.reshape(&[m, h * w])?;

    let occ = occupancy(rects, h, w);
    let shared = Tensor::from_fn(&[1, h * w], |p| if occ[p] > 1 { T::one() } else { T::zero() });
    let alone = shared.map(|v| T::one() - v);
    let denom = tape
        .constant(Tensor::ones(&[1, m]))
        .matmul(&flat)?
        .mul_const(&shared)?
        .add_const(&alone)?
        .clamp_min(DENOM_FLOOR)
        .recip()
        .gather_rows(&vec![0; c])?;

    let field = |t: &Var<'t, T>| -> Result<Var<'t, T>> {
        t.transpose()?.matmul(&flat)?.mul(&denom)?.reshape(&[c, h, w])
    };
    Ok((field(t_gamma)?, field(t_beta)?))
}

/// Standardizes `x` (`N×C×H×W`) over the whole batch, then applies each
/// sample's `γ`/`β` fields.
pub fn isla_apply<'t, T: Element>(x: &Var<'t, T>, gammas: &[Var<'t, T>], betas: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let g = Var::stack(gammas)?;
    let b = Var::stack(betas)?;
    x.standardize()?.mul(&g)?.add(&b)
}

/// Index of the largest entry along the leading axis of a `k×H×W` stack at
/// each pixel; ties go to the lowest index.
pub fn argmax_map<T: Element>(stack: &Tensor<T>) -> Vec<usize> {
    let s = stack.shape();
    let (k, hw) = (s[0], s[1] * s[2]);
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for i in 1..k {
                if stack.data()[i * hw + p] > stack.data()[best * hw + p] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-sample instance data one ISLA layer needs at one resolution.
pub struct StageInstances<'t, T: Element> {
    /// Generated masks placed at this resolution, `m'×H×W`.
    pub generated: Var<'t, T>,
    /// Feature-derived masks clipped to the boxes, `m'×H×W`.
    pub from_features: Var<'t, T>,
    pub rects: Vec<PixelRect>,
    /// Rows of the batch-wide encoding matrix belonging to this sample.
    pub rows: std::ops::Range<usize>,
}

/// One ISLA-Norm layer over a batch.
///
/// `encoding` is the stacked joint encoding of every instance in the batch.
/// Returns the recalibrated features and each sample's blended masks.
pub fn isla_layer<'t, T: Element>(
    ctx: &Ctx<'t, '_, T>,
    prefix: &str,
    x: &Var<'t, T>,
    encoding: &Var<'t, T>,
    samples: &[StageInstances<'t, T>],
    alpha_override: Option<f64>,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let (t_beta, t_gamma) = affine_table(encoding, &ctx.weight(&format!("{prefix}.proj.w"))?)?;
    let alpha = match alpha_override {
        Some(a) => ctx.tape().constant(Tensor::scalar(T::of(a))),
        None => ctx.param(&format!("{prefix}.alpha")),
    };
    let mut gammas = Vec::with_capacity(samples.len());
    let mut betas = Vec::with_capacity(samples.len());
    let mut blended = Vec::with_capacity(samples.len());
    for s in samples {
        let m = blend_masks(&s.generated, &s.from_features, &alpha)?;
        let len = s.rows.len();
        let (g, b) = compose_isla(
            &m,
            &t_gamma.slice(0, s.rows.start, len)?,
            &t_beta.slice(0, s.rows.start, len)?,
            &s.rects,
        )?;
        gammas.push(g);
        betas.push(b);
        blended.push(m);
    }
    Ok((isla_apply(x, &gammas, &betas)?, blended))
}

/// Registers the projection `A` and blend weight `α` of one ISLA layer.
pub fn add_isla_params<T: Element>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, channels: usize) {
    store.insert_normalized(&format!("{prefix}.proj.w"), &[d_in, 2 * channels]);
    store.insert(&format!("{prefix}.alpha"), Tensor::zeros(&[1]));
}

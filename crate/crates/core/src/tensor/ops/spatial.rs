//! Placing patches onto a canvas and bilinear region pooling.

use super::super::{invalid, Element, Result, Tensor, Var};

/// A region in continuous feature-map coordinates, where pixel `(r, c)` covers
/// `[c, c + 1) × [r, r + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Four bilinear taps `(flat index, weight)` for a sample at `(y, x)`, with the
/// coordinates clamped into the map.
fn taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (ty, tx) = (y - r0 as f64, x - c0 as f64);
    [
        (r0 * w + c0, (1.0 - ty) * (1.0 - tx)),
        (r0 * w + c1, (1.0 - ty) * tx),
        (r1 * w + c0, ty * (1.0 - tx)),
        (r1 * w + c1, ty * tx),
    ]
}

/// Sampling plan: for each roi, its batch index and `k·k` tap sets.
fn plan(shape: &[usize], rois: &[(usize, RoiRect)], k: usize) -> Result<Vec<(usize, Vec<[(usize, f64); 4]>)>> {
    let &[n, _, h, w] = shape else {
        return Err(invalid("roi_align", format!("expects N×C×H×W, got {shape:?}")));
    };
    if k == 0 || h == 0 || w == 0 {
        return Err(invalid("roi_align", "empty output or feature map"));
    }
    rois.iter()
        .map(|&(b, r)| {
            if b >= n {
                return Err(invalid("roi_align", format!("batch index {b} of {n}")));
            }
            if !(r.x1 > r.x0 && r.y1 > r.y0) || ![r.x0, r.x1, r.y0, r.y1].iter().all(|v| v.is_finite()) {
                return Err(invalid("roi_align", format!("degenerate region {r:?}")));
            }
            let (bh, bw) = ((r.y1 - r.y0) / k as f64, (r.x1 - r.x0) / k as f64);
            let mut pts = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    let y = r.y0 + (i as f64 + 0.5) * bh - 0.5;
                    let x = r.x0 + (j as f64 + 0.5) * bw - 0.5;
                    pts.push(taps(y, x, h, w));
                }
            }
            Ok((b, pts))
        })
        .collect()
}

/// Bilinear region pooling to a `k×k` grid, one sample per bin centre.
/// Output is `R×C×k×k`.
pub fn roi_align_values<T: Element>(x: &Tensor<T>, rois: &[(usize, RoiRect)], k: usize) -> Result<Tensor<T>> {
    let plan = plan(x.shape(), rois, k)?;
    let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
    let mut out = vec![T::zero(); rois.len() * c * k * k];
    for (ri, (b, pts)) in plan.iter().enumerate() {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let dst = &mut out[(ri * c + ch) * k * k..(ri * c + ch + 1) * k * k];
            for (d, t) in dst.iter_mut().zip(pts) {
                *d = t.iter().map(|&(i, wt)| src[i] * T::of(wt)).sum();
            }
        }
    }
    Tensor::new(&[rois.len(), c, k, k], out)
}

impl<'t, T: Element> Var<'t, T> {
    /// See [`roi_align_values`].
    pub fn roi_align(&self, rois: &[(usize, RoiRect)], k: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let value = roi_align_values(&xv, rois, k)?;
        let plan = plan(xv.shape(), rois, k)?;
        let shape = xv.shape().to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        Ok(self.tape().push(
            "roi_align",
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for (ri, (b, pts)) in plan.iter().enumerate() {
                    for ch in 0..c {
                        let src = &g.data()[(ri * c + ch) * k * k..(ri * c + ch + 1) * k * k];
                        let dst = &mut gx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (&gv, t) in src.iter().zip(pts.iter()) {
                            for &(i, wt) in t {
                                dst[i] += gv * T::of(wt);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Writes an `…×h×w` patch into a zero `…×height×width` canvas with its top
    /// left corner at `(top, left)`.
    pub fn place(&self, height: usize, width: usize, top: usize, left: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(invalid("place", format!("needs rank >= 2, got {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        if top + h > height || left + w > width {
            return Err(invalid(
                "place",
                format!("{h}×{w} patch at ({top}, {left}) exceeds {height}×{width}"),
            ));
        }
        let lead: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[r - 2] = height;
        out_shape[r - 1] = width;
        let mut out = vec![T::zero(); lead * height * width];
        for p in 0..lead {
            for i in 0..h {
                let s = (p * h + i) * w;
                let d = (p * height + top + i) * width + left;
                out[d..d + w].copy_from_slice(&xv.data()[s..s + w]);
            }
        }
        Ok(self.tape().push(
            "place",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..lead {
                    for i in 0..h {
                        let s = (p * h + i) * w;
                        let d = (p * height + top + i) * width + left;
                        gx.data_mut()[s..s + w].copy_from_slice(&g.data()[d..d + w]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

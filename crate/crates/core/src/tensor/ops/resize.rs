//! Bilinear resize and the fixed-factor 2× pooling / upsampling used by the
//! residual blocks. All act on the last two axes.

use super::super::{invalid, Element, Result, Tensor, Var};

/// Interpolation taps along one axis: `(i0, i1, t)` per output index, so the
/// value is `v[i0] + t·(v[i1] − v[i0])`.
fn axis_taps(input: usize, output: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output == 1 {
                    0.0
                } else {
                    o as f64 * (input - 1) as f64 / (output - 1) as f64
                }
            } else {
                ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid("resize", format!("needs rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

struct Bilinear {
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

impl Bilinear {
    fn apply<T: Element>(&self, src: &[T], w: usize, dst: &mut [T]) {
        let ow = self.cols.len();
        for (r, &(y0, y1, ty)) in self.rows.iter().enumerate() {
            let ty = T::of(ty);
            for (c, &(x0, x1, tx)) in self.cols.iter().enumerate() {
                let tx = T::of(tx);
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (p, q) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + tx * (b - a);
                let bottom = p + tx * (q - p);
                dst[r * ow + c] = top + ty * (bottom - top);
            }
        }
    }

    fn adjoint<T: Element>(&self, g: &[T], w: usize, dst: &mut [T]) {
        let ow = self.cols.len();
        for (r, &(y0, y1, ty)) in self.rows.iter().enumerate() {
            let ty = T::of(ty);
            for (c, &(x0, x1, tx)) in self.cols.iter().enumerate() {
                let tx = T::of(tx);
                let gv = g[r * ow + c];
                let (one_y, one_x) = (T::one() - ty, T::one() - tx);
                dst[y0 * w + x0] += gv * one_y * one_x;
                dst[y0 * w + x1] += gv * one_y * tx;
                dst[y1 * w + x0] += gv * ty * one_x;
                dst[y1 * w + x1] += gv * ty * tx;
            }
        }
    }
}

/// Plain bilinear resize of the last two axes.
pub fn bilinear_resize_values<T: Element>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let (lead, h, w) = planes(x.shape())?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(invalid("bilinear_resize", "sizes must be >= 1"));
    }
    let op = Bilinear {
        rows: axis_taps(h, out_h, align_corners),
        cols: axis_taps(w, out_w, align_corners),
    };
    let mut out = vec![T::zero(); lead * out_h * out_w];
    for p in 0..lead {
        op.apply(
            &x.data()[p * h * w..(p + 1) * h * w],
            w,
            &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
        );
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(&shape, out)
}

impl<'t, T: Element> Var<'t, T> {
    /// Bilinear resize of the last two axes.
    ///
    /// With `align_corners` the corner samples of input and output coincide;
    /// otherwise pixel centres are aligned (`src = (o + ½)·in/out − ½`,
    /// clamped at 0), which is the convention used for all mask resizing.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<'t, T>> {
        let xv = self.value();
        let value = bilinear_resize_values(&xv, out_h, out_w, align_corners)?;
        let (lead, h, w) = planes(xv.shape())?;
        let op = Bilinear {
            rows: axis_taps(h, out_h, align_corners),
            cols: axis_taps(w, out_w, align_corners),
        };
        let shape = xv.shape().to_vec();
        Ok(self.tape().push(
            "bilinear_resize",
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..lead {
                    op.adjoint(
                        &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w],
                        w,
                        &mut gx.data_mut()[p * h * w..(p + 1) * h * w],
                    );
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (lead, h, w) = planes(xv.shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); lead * oh * ow];
        for p in 0..lead {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    dst[r * ow + c] = src[(r / 2) * w + c / 2];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let mut out_shape = shape.clone();
        let rank = shape.len();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        Ok(self.tape().push(
            "upsample2",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..lead {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for r in 0..oh {
                        for c in 0..ow {
                            dst[(r / 2) * w + c / 2] += src[r * ow + c];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2; spatial sides must be even.
    pub fn avg_pool2(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let (lead, h, w) = planes(xv.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); lead * oh * ow];
        for p in 0..lead {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    let i = 2 * r * w + 2 * c;
                    dst[r * ow + c] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let mut out_shape = shape.clone();
        let rank = shape.len();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        Ok(self.tape().push(
            "avg_pool2",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for p in 0..lead {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
                    for r in 0..h {
                        for c in 0..w {
                            dst[r * w + c] = src[(r / 2) * ow + c / 2] * quarter;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

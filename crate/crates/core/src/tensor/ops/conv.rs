//! 2-D cross-correlation lowered onto GEMM through an im2col buffer.

use std::rc::Rc;

use super::super::{invalid, Element, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride 1 with "same" padding for an odd kernel of side `k`.
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: k / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (x, k) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        };
        if c != kc {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel {kh}×{kw} must have odd sides")));
        }
        if spec.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let span_h = (h + 2 * spec.padding).checked_sub(kh);
        let span_w = (w + 2 * spec.padding).checked_sub(kw);
        let (Some(sh), Some(sw)) = (span_h, span_w) else {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        };
        if sh % spec.stride != 0 || sw % spec.stride != 0 {
            return Err(invalid(
                "conv2d",
                format!("padding {} and stride {} give a fractional output size", spec.padding, spec.stride),
            ));
        }
        Ok(Geometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: sh / spec.stride + 1,
            wo: sw / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate for output index `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let p = self.pixels_out();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    for oh in 0..self.ho {
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        match self.src(oh, i, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                            Some(ih) => {
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ow, j, self.w) {
                                        Some(iw) => plane[ih * self.w + iw],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], x: &mut [T]) {
        let p = self.pixels_out();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * p;
                    for oh in 0..self.ho {
                        let Some(ih) = self.src(oh, i, self.h) else {
                            continue;
                        };
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        for (ow, &s) in src.iter().enumerate() {
                            if let Some(iw) = self.src(ow, j, self.w) {
                                plane[ih * self.w + iw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lowered inputs, one `CKK × HoWo` block per sample (empty for 1×1 convs,
/// where the input itself is the lowered matrix).
fn lower<T: Element>(g: &Geometry, x: &[T]) -> Vec<T> {
    if g.is_pointwise() {
        return Vec::new();
    }
    let block = g.ckk() * g.pixels_out();
    let mut cols = vec![T::zero(); g.n * block];
    for b in 0..g.n {
        let xs = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        g.im2col(xs, &mut cols[b * block..(b + 1) * block]);
    }
    cols
}

fn forward<T: Element>(g: &Geometry, x: &[T], k: &[T], cols: &[T]) -> Vec<T> {
    let (p, ckk) = (g.pixels_out(), g.ckk());
    let mut out = vec![T::zero(); g.n * g.o * p];
    for b in 0..g.n {
        let lowered = if g.is_pointwise() {
            &x[b * ckk * p..(b + 1) * ckk * p]
        } else {
            &cols[b * ckk * p..(b + 1) * ckk * p]
        };
        T::gemm(g.o, ckk, p, k, false, lowered, false, &mut out[b * g.o * p..(b + 1) * g.o * p], false);
    }
    out
}

/// Plain (non-recording) convolution.
pub fn conv2d_forward<T: Element>(x: &Tensor<T>, k: &Tensor<T>, spec: Conv2dSpec) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), k.shape(), spec)?;
    let cols = lower(&g, x.data());
    Tensor::new(&[g.n, g.o, g.ho, g.wo], forward(&g, x.data(), k.data(), &cols))
}

impl<'t, T: Element> Var<'t, T> {
    /// Cross-correlation of `N×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(&self, kernel: &Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        self.check_same_tape(kernel);
        let (xv, kv) = (self.value(), kernel.value());
        let g = Geometry::new(xv.shape(), kv.shape(), spec)?;
        let cols = Rc::new(lower(&g, xv.data()));
        let out = forward(&g, xv.data(), kv.data(), &cols);
        Ok(self.tape().push(
            "conv2d",
            Tensor::new(&[g.n, g.o, g.ho, g.wo], out)?,
            &[*self, *kernel],
            Box::new(move |grad, needs| {
                let (p, ckk) = (g.pixels_out(), g.ckk());
                let gd = grad.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
                    let mut dcols = vec![T::zero(); ckk * p];
                    for b in 0..g.n {
                        let gb = &gd[b * g.o * p..(b + 1) * g.o * p];
                        let dxs = &mut dx[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
                        if g.is_pointwise() {
                            T::gemm(ckk, g.o, p, kv.data(), true, gb, false, dxs, false);
                        } else {
                            T::gemm(ckk, g.o, p, kv.data(), true, gb, false, &mut dcols, false);
                            g.col2im(&dcols, dxs);
                        }
                    }
                    Tensor::new(xv.shape(), dx).expect("shape")
                });
                let gk = needs[1].then(|| {
                    let mut dk = vec![T::zero(); g.o * ckk];
                    for b in 0..g.n {
                        let gb = &gd[b * g.o * p..(b + 1) * g.o * p];
                        let lowered = if g.is_pointwise() {
                            &xv.data()[b * ckk * p..(b + 1) * ckk * p]
                        } else {
                            &cols[b * ckk * p..(b + 1) * ckk * p]
                        };
                        T::gemm(g.o, p, ckk, gb, false, lowered, true, &mut dk, b > 0);
                    }
                    Tensor::new(kv.shape(), dk).expect("shape")
                });
                vec![gx, gk]
            }),
        ))
    }
}

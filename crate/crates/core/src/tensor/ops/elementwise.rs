//! Unary maps and broadcasting binary arithmetic.
//!
//! Broadcasting is deliberately narrow: equal shapes, a one-element tensor
//! against anything, or a `[C]` vector against a tensor whose axis 1 has
//! length `C` (per-channel bias/scale for `N×C` and `N×C×H×W`).

use super::super::{Element, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
enum Mapping {
    Same,
    Scalar,
    Channel { channels: usize, inner: usize },
}

impl Mapping {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Mapping::Same => i,
            Mapping::Scalar => 0,
            Mapping::Channel { channels, inner } => (i / inner) % channels,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Broadcast {
    lhs_is_big: bool,
    mapping: Mapping,
}

impl Broadcast {
    fn classify(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast {
                lhs_is_big: true,
                mapping: Mapping::Same,
            });
        }
        let n_l: usize = lhs.iter().product();
        let n_r: usize = rhs.iter().product();
        if n_r == 1 {
            return Ok(Broadcast {
                lhs_is_big: true,
                mapping: Mapping::Scalar,
            });
        }
        if n_l == 1 {
            return Ok(Broadcast {
                lhs_is_big: false,
                mapping: Mapping::Scalar,
            });
        }
        let channel = |big: &[usize], small: &[usize]| {
            (small.len() == 1 && big.len() >= 2 && big[1] == small[0]).then(|| Mapping::Channel {
                channels: small[0],
                inner: big[2..].iter().product(),
            })
        };
        if let Some(mapping) = channel(lhs, rhs) {
            return Ok(Broadcast {
                lhs_is_big: true,
                mapping,
            });
        }
        if let Some(mapping) = channel(rhs, lhs) {
            return Ok(Broadcast {
                lhs_is_big: false,
                mapping,
            });
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    #[inline]
    fn lhs(self, i: usize) -> usize {
        if self.lhs_is_big {
            i
        } else {
            self.mapping.index(i)
        }
    }

    #[inline]
    fn rhs(self, i: usize) -> usize {
        if self.lhs_is_big {
            self.mapping.index(i)
        } else {
            i
        }
    }
}

fn binary<'t, T: Element>(
    op: &'static str,
    a: &Var<'t, T>,
    b: &Var<'t, T>,
    f: fn(T, T) -> T,
    // partial derivatives (d/da, d/db) at (a, b)
    df: fn(T, T) -> (T, T),
) -> Result<Var<'t, T>> {
    a.check_same_tape(b);
    let av = a.value();
    let bv = b.value();
    let bc = Broadcast::classify(op, av.shape(), bv.shape())?;
    let out_shape = if bc.lhs_is_big { av.shape() } else { bv.shape() }.to_vec();
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (av.data(), bv.data());
    let out: Vec<T> = (0..n).map(|i| f(ad[bc.lhs(i)], bd[bc.rhs(i)])).collect();
    let value = Tensor::new(&out_shape, out)?;
    Ok(a.tape().push(
        op,
        value,
        &[*a, *b],
        Box::new(move |g, needs| {
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = needs[0].then(|| Tensor::zeros(av.shape()));
            let mut gb = needs[1].then(|| Tensor::zeros(bv.shape()));
            for (i, &gi) in g.data().iter().enumerate() {
                let (ia, ib) = (bc.lhs(i), bc.rhs(i));
                let (da, db) = df(ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga.data_mut()[ia] += gi * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb.data_mut()[ib] += gi * db;
                }
            }
            vec![ga, gb]
        }),
    ))
}

fn unary<'t, T: Element>(
    op: &'static str,
    x: &Var<'t, T>,
    f: impl Fn(T) -> T,
    // derivative expressed through (input, output)
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    let xv = x.value();
    let out = xv.map(f);
    let yv = std::rc::Rc::new(out.clone());
    x.tape().push(
        op,
        out,
        &[*x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
        }),
    )
}

/// Logistic function evaluated without overflow for either sign.
#[inline]
pub fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        binary("add", self, other, |a, b| a + b, |_, _| (T::one(), T::one()))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        binary("sub", self, other, |a, b| a - b, |_, _| (T::one(), -T::one()))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        binary("mul", self, other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b,
            |a, b| (T::one() / b, -a / (b * b)),
        )
    }

    /// Elementwise product with a constant (broadcast rules as for `mul`).
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let k = self.tape().constant(c.clone());
        self.mul(&k)
    }

    pub fn add_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let k = self.tape().constant(c.clone());
        self.add(&k)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        unary("scale", self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        unary("add_scalar", self, move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Var<'t, T> {
        unary("neg", self, |x| -x, |_, _| -T::one())
    }

    /// `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(&self) -> Var<'t, T> {
        unary(
            "relu",
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        unary("sigmoid", self, stable_sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Var<'t, T> {
        unary("tanh", self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&self) -> Var<'t, T> {
        unary(
            "abs",
            self,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Var<'t, T> {
        unary("square", self, |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        unary("sqrt", self, |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn recip(&self) -> Var<'t, T> {
        unary("recip", self, |x| T::one() / x, |_, y| -y * y)
    }

    /// `max(x, floor)`, passing the gradient only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Var<'t, T> {
        let f = T::of(floor);
        unary(
            "clamp_min",
            self,
            move |x| if x > f { x } else { f },
            move |x, _| if x > f { T::one() } else { T::zero() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::super::{grad_check, Tape};
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 800.0, -800.0]));
        let y = x.sigmoid().value();
        assert_eq!(y.data(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn relu_pair_is_abs() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[-2.0, -0.5, 0.0, 3.0]));
        let s = x.relu().add(&x.neg().relu()).unwrap();
        assert_eq!(s.value().data(), x.abs().value().data());
    }

    #[test]
    fn l1_of_difference_with_itself_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 7.0]));
        assert_eq!(x.sub(&x).unwrap().l1_norm().value().item(), 0.0);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.0, 1.0, -1.0]));
        tape.backward(x.relu().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn incompatible_broadcast_is_a_dimension_error() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = a.add(&b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn channel_broadcast_matches_manual_expansion() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let y = x.add(&b).unwrap().value();
        for n in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    let i = ((n * 3 + c) * 4) + s;
                    assert_eq!(y.data()[i], i as f64 + 10.0 * (c + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn binary_ops_pass_grad_check_under_broadcast() {
        let x0 = Tensor::from_fn(&[2, 3, 2, 2], |i| 0.3 + ((i * 7 % 11) as f64) * 0.1);
        let c0 = t(&[3], &[0.7, 1.3, -0.4]);
        let s0 = t(&[1], &[1.7]);
        for which in 0..4 {
            let report = grad_check(
                |tape, x| {
                    let c = tape.constant(c0.clone());
                    let s = tape.constant(s0.clone());
                    let y = match which {
                        0 => x.add(&c)?.mul(&s)?,
                        1 => x.mul(&c)?.sub(&s)?,
                        2 => c.div(&x.add_scalar(2.0))?.tanh().mul(&x)?,
                        _ => s.div(&x)?.sqrt().sigmoid().square(),
                    };
                    Ok(y.sum())
                },
                &x0,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "case {which}: {report:?}");
        }
        // gradient w.r.t. the broadcast operand
        let report = grad_check(
            |tape, c| {
                let x = tape.constant(x0.clone());
                Ok(x.mul(&c)?.square().sum())
            },
            &c0,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

use super::super::{invalid, Element, Result, Tensor, Var};

impl<'t, T: Element> Var<'t, T> {
    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.tape().push(
            "sum",
            Tensor::scalar(xv.sum()),
            &[*self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// `Σ|x|`.
    pub fn l1_norm(&self) -> Var<'t, T> {
        self.abs().sum()
    }

    /// Mean over every axis except axis 1: `N×C×…` to `[C]`.
    pub fn channel_mean(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || xv.is_empty() {
            return Err(invalid(
                "channel_mean",
                format!("needs a non-empty tensor of rank >= 2, got {shape:?}"),
            ));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let count = T::of((n * inner) as f64);
        let mut out = vec![T::zero(); c];
        for b in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                let base = (b * c + ch) * inner;
                let s: T = xv.data()[base..base + inner].iter().copied().sum();
                *o += s;
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        Ok(self.tape().push(
            "channel_mean",
            Tensor::new(&[c], out)?,
            &[*self],
            Box::new(move |g, _| {
                let gd = g.data();
                let data = (0..n * c * inner)
                    .map(|i| gd[(i / inner) % c] / count)
                    .collect();
                vec![Some(Tensor::new(&shape, data).expect("shape"))]
            }),
        ))
    }

    /// Mean over the spatial axes: `N×C×H×W` to `N×C`.
    pub fn spatial_mean(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if shape.len() != 4 {
            return Err(invalid("spatial_mean", format!("expects N×C×H×W, got {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let rows = shape[0] * shape[1];
        let inv = T::of(1.0 / hw as f64);
        let out = (0..rows)
            .map(|r| xv.data()[r * hw..(r + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.tape().push(
            "spatial_mean",
            Tensor::new(&shape[..2], out)?,
            &[*self],
            Box::new(move |g, _| {
                let gd = g.data();
                let data = (0..rows * hw).map(|i| gd[i / hw] * inv).collect();
                vec![Some(Tensor::new(&shape, data).expect("shape"))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::super::{grad_check, Tape};
    use super::*;

    #[test]
    fn channel_mean_matches_loop() {
        let tape = Tape::<f64>::new();
        let x0 = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.7).sin());
        let m = tape.constant(x0.clone()).channel_mean().unwrap().value();
        for c in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                for k in 0..4 {
                    s += x0.data()[(n * 3 + c) * 4 + k];
                }
            }
            assert!((m.data()[c] - s / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reductions_pass_grad_check() {
        let x0 = Tensor::from_fn(&[2, 3, 2, 2], |i| 0.2 + (i as f64 * 0.37).cos());
        let r = grad_check(
            |tape, x| {
                let w = tape.constant(Tensor::from_fn(&[3], |i| i as f64 + 0.5));
                let w2 = tape.constant(Tensor::from_fn(&[2, 3], |i| 1.0 - 0.3 * i as f64));
                Ok(x
                    .channel_mean()?
                    .mul(&w)?
                    .sum()
                    .add(&x.spatial_mean()?.mul(&w2)?.mean())?)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}

use super::super::{invalid, Element, Result, Tensor, TensorError, Var};

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl<'t, T: Element> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let value = (*xv).clone().reshape(shape)?;
        Ok(self.tape().push(
            "reshape",
            value,
            &[*self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("same numel"))]),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "nothing to concatenate"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let (outer, inner) = outer_inner(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        for p in &parts[1..] {
            first.check_same_tape(p);
        }
        Ok(first.tape().push(
            "concat",
            Tensor::new(&out_shape, data)?,
            parts,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (k, &sz) in sizes.iter().enumerate() {
                    if needs[k] {
                        let mut d = Vec::with_capacity(outer * sz * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + sz * inner]);
                        }
                        let mut shape = base.clone();
                        shape[axis] = sz;
                        grads.push(Some(Tensor::new(&shape, d).expect("shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += sz;
                }
                grads
            }),
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.tape().push(
            "slice",
            Tensor::new(&out_shape, data)?,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                let gd = g.data();
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    gx.data_mut()[s..s + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows `indices[i]` of the leading axis, repeats allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let rows = shape.first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("row {bad} of {rows}")));
        }
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&xv.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(self.tape().push(
            "gather_rows",
            Tensor::new(&out_shape, data)?,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&shape);
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g.data()[k * inner..(k + 1) * inner];
                    for (d, &s) in gx.data_mut()[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let reshaped = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&reshaped, 0)
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let xv = self.value();
        let &[r, c] = xv.shape() else {
            return Err(invalid("transpose", format!("expects a matrix, got {:?}", xv.shape())));
        };
        let t = |d: &[T], rows: usize, cols: usize| {
            let mut out = vec![T::zero(); rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = d[i * cols + j];
                }
            }
            out
        };
        let value = Tensor::new(&[c, r], t(xv.data(), r, c))?;
        Ok(self.tape().push(
            "transpose",
            value,
            &[*self],
            Box::new(move |g, _| vec![Some(Tensor::new(&[r, c], t(g.data(), c, r)).expect("shape"))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::super::{grad_check, Tape};
    use super::*;

    #[test]
    fn concat_then_slice_roundtrips() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| 10.0 + i as f64));
        let ab = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(ab.shape(), vec![2, 5]);
        assert_eq!(ab.value().data()[..5], [0.0, 1.0, 10.0, 11.0, 12.0]);
        assert_eq!(*ab.slice(1, 2, 3).unwrap().value(), *b.value());
        assert_eq!(*ab.slice(1, 0, 2).unwrap().value(), *a.value());
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(Var::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn shape_ops_pass_grad_check() {
        let x0 = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.9).sin());
        let r = grad_check(
            |tape, x| {
                let w = tape.constant(Tensor::from_fn(&[4, 5], |i| (i as f64).cos()));
                let y = Var::concat(&[x, x.gather_rows(&[2, 0, 2])?], 0)?;
                let z = y.slice(1, 1, 3)?.transpose()?.reshape(&[18])?;
                let wz = Var::concat(&[z, z], 0)?.square().sum();
                Ok(wz.add(&y.slice(1, 0, 4)?.mul(&w.slice(1, 0, 4)?.slice(0, 0, 4)?.transpose()?.gather_rows(&[0, 1, 2, 3, 0, 1])?)?.sum())?)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }
}

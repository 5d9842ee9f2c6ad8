use super::super::{Element, Result, Tensor, TensorError, Var};

impl<'t, T: Element> Var<'t, T> {
    /// Matrix product `[M×K]·[K×N]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_tape(other);
        let (av, bv) = (self.value(), other.value());
        let (m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (a, b) => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        Ok(self.tape().push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            &[*self, *other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut d, false);
                    Tensor::new(&[m, k], d).expect("shape")
                });
                let gb = needs[1].then(|| {
                    // dB = Aᵀ · G
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, g.data(), false, &mut d, false);
                    Tensor::new(&[k, n], d).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }
}

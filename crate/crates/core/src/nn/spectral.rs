//! Spectral normalization.
//!
//! Each normalized weight `W`, viewed as `shape[0] × rest`, keeps persistent
//! estimates `u`, `v` of its leading singular vectors. A refresh is either a
//! power iteration step or an exact solve through the eigendecomposition of
//! the smaller Gram matrix; the normalized weight is `W / σ̂` with
//! `σ̂ = uᵀ W v`, floored at [`SIGMA_FLOOR`].

use crate::tensor::{Element, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

fn dims<T: Element>(w: &Tensor<T>) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows.max(1))
}

fn normalize<T: Element>(x: &mut [T]) {
    let n = x.iter().map(|&v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let inv = T::of(1.0 / n.max(SIGMA_FLOOR));
    x.iter_mut().for_each(|v| *v *= inv);
}

impl<T: Element> SpectralState<T> {
    /// Random unit-norm starting vectors for `w`.
    pub fn new(w: &Tensor<T>, seed: u64) -> Self {
        let (rows, cols) = dims(w);
        let mut u: Vec<T> = crate::rng::gaussian(seed, rows).into_iter().map(T::of).collect();
        normalize(&mut u);
        let mut s = SpectralState { u, v: vec![T::zero(); cols] };
        s.update_v(w);
        s
    }

    fn update_v(&mut self, w: &Tensor<T>) {
        let (rows, cols) = dims(w);
        T::gemm(1, rows, cols, &self.u, false, w.data(), false, &mut self.v, false);
        normalize(&mut self.v);
    }

    /// One power iteration: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn refresh(&mut self, w: &Tensor<T>) {
        let (rows, cols) = dims(w);
        self.update_v(w);
        T::gemm(rows, cols, 1, w.data(), false, &self.v, false, &mut self.u, false);
        normalize(&mut self.u);
    }

    /// Sets `u`, `v` to the exact leading singular pair of `w`. Power
    /// iteration stalls when the top of the spectrum is nearly flat, as it is
    /// right after orthogonal initialization.
    pub fn refresh_exact(&mut self, w: &Tensor<T>) {
        let (rows, cols) = dims(w);
        let wd: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
        // Gram of the short side: W Wᵀ when rows ≤ cols, else Wᵀ W.
        let short = rows.min(cols);
        let mut gram = vec![0.0; short * short];
        if rows <= cols {
            f64::gemm(rows, cols, rows, &wd, false, &wd, true, &mut gram, false);
        } else {
            f64::gemm(cols, rows, cols, &wd, true, &wd, false, &mut gram, false);
        }
        let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(short, short, &gram));
        let top = eig.eigenvalues.imax();
        let lead: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        let (mut u, mut v) = (vec![0.0; rows], vec![0.0; cols]);
        if rows <= cols {
            u.copy_from_slice(&lead);
            f64::gemm(1, rows, cols, &u, false, &wd, false, &mut v, false);
        } else {
            v.copy_from_slice(&lead);
            f64::gemm(rows, cols, 1, &wd, false, &v, false, &mut u, false);
        }
        normalize(&mut u);
        normalize(&mut v);
        self.u = u.into_iter().map(T::of).collect();
        self.v = v.into_iter().map(T::of).collect();
    }

    /// `uᵀ W v`.
    pub fn sigma(&self, w: &Tensor<T>) -> T {
        let (rows, cols) = dims(w);
        let mut wv = vec![T::zero(); rows];
        T::gemm(rows, cols, 1, w.data(), false, &self.v, false, &mut wv, false);
        self.u.iter().zip(&wv).map(|(&a, &b)| a * b).sum()
    }

    /// The rank-one matrix `u vᵀ` in `w`'s shape, so that
    /// `σ̂ = Σ W ⊙ u vᵀ`.
    pub fn outer(&self, w: &Tensor<T>) -> Tensor<T> {
        let cols = self.v.len();
        Tensor::from_fn(w.shape(), |i| self.u[i / cols] * self.v[i % cols])
    }
}

/// `W / σ̂` after `iters` refreshes of `state`.
pub fn spectral_normalize<T: Element>(w: &Tensor<T>, state: &mut SpectralState<T>, iters: usize) -> Tensor<T> {
    for _ in 0..iters {
        state.refresh(w);
    }
    let sigma = state.sigma(w).as_f64().max(SIGMA_FLOOR);
    let inv = T::of(1.0 / sigma);
    w.map(|x| x * inv)
}

/// Largest singular value estimated by a fresh `iters`-step power method,
/// independent of any stored state.
pub fn estimate_sigma_max(w: &Tensor<f64>, iters: usize, seed: u64) -> f64 {
    let mut s = SpectralState::new(w, seed);
    for _ in 0..iters {
        s.refresh(w);
    }
    s.sigma(w).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::orthogonal_init;

    #[test]
    fn exact_refresh_finds_the_top_singular_value() {
        for shape in [[3usize, 7], [7, 3], [4, 4]] {
            let w = Tensor::<f64>::from_fn(&shape, |i| ((i * 13 % 7) as f64 - 3.0) * 0.3 + (i as f64).sin());
            let mut s = SpectralState::new(&w, 2);
            s.refresh_exact(&w);
            let slow = estimate_sigma_max(&w, 2000, 9);
            assert!((s.sigma(&w) - slow).abs() < 1e-9, "{shape:?}");
        }
        let d = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, -3.0]).unwrap();
        let mut s = SpectralState::new(&d, 1);
        s.refresh_exact(&d);
        assert!((s.sigma(&d) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_is_divided_by_its_top_value() {
        let w = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut s = SpectralState::new(&w, 4);
        let n = spectral_normalize(&w, &mut s, 50);
        assert!((n.data()[0] - 1.0).abs() < 1e-9 && (n.data()[3] - 1.0 / 3.0).abs() < 1e-9);
        assert!((estimate_sigma_max(&n, 50, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_matrix_is_unchanged() {
        let w = orthogonal_init::<f64>(&[5, 5], 8);
        let mut s = SpectralState::new(&w, 2);
        let n = spectral_normalize(&w, &mut s, 1);
        assert!(n.max_abs_diff(&w) < 1e-4);
    }

    #[test]
    fn zero_matrix_stays_zero() {
        let w = Tensor::<f64>::zeros(&[3, 4]);
        let mut s = SpectralState::new(&w, 1);
        let n = spectral_normalize(&w, &mut s, 3);
        assert!(n.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_conv_kernel_is_bounded_after_warmup() {
        let w = Tensor::<f64>::from_fn(&[8, 3, 3, 3], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.4);
        let mut s = SpectralState::new(&w, 5);
        let n = spectral_normalize(&w, &mut s, 20);
        assert!(estimate_sigma_max(&n, 50, 77) <= 1.0 + 1e-3);
    }
}

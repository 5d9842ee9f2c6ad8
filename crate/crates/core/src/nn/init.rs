//! Orthogonal weight initialization.

use crate::rng;
use crate::tensor::{Element, Tensor};

/// Orthonormalizes the rows of a `rows×cols` matrix (`rows <= cols`) with two
/// passes of modified Gram-Schmidt.
fn orthonormal_rows(a: &mut [f64], rows: usize, cols: usize) {
    for _pass in 0..2 {
        for i in 0..rows {
            for j in 0..i {
                let dot: f64 = (0..cols).map(|k| a[i * cols + k] * a[j * cols + k]).sum();
                for k in 0..cols {
                    a[i * cols + k] -= dot * a[j * cols + k];
                }
            }
            let norm = (0..cols).map(|k| a[i * cols + k].powi(2)).sum::<f64>().sqrt();
            for k in 0..cols {
                a[i * cols + k] /= norm;
            }
        }
    }
}

/// A tensor whose 2-D view `shape[0] × (product of the rest)` has orthonormal
/// rows, or orthonormal columns when it has more rows than columns.
pub fn orthogonal_init<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    assert!(shape.len() >= 2, "orthogonal init needs rank >= 2, got {shape:?}");
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (r, c) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut a = rng::gaussian(seed, r * c);
    orthonormal_rows(&mut a, r, c);
    let data: Vec<f64> = if rows <= cols {
        a
    } else {
        (0..rows * cols).map(|i| a[(i % cols) * rows + i / cols]).collect()
    };
    Tensor::from_f64(shape, &data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(q: &Tensor<f64>, rows: usize, cols: usize, by_rows: bool) -> f64 {
        let d = q.data();
        let n = if by_rows { rows } else { cols };
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = if by_rows {
                    (0..cols).map(|k| d[i * cols + k] * d[j * cols + k]).sum()
                } else {
                    (0..rows).map(|k| d[k * cols + i] * d[k * cols + j]).sum()
                };
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn square_is_orthogonal() {
        let q = orthogonal_init::<f64>(&[6, 6], 1);
        assert!(gram(&q, 6, 6, false) < 1e-5);
        assert!(gram(&q, 6, 6, true) < 1e-5);
    }

    #[test]
    fn wide_has_orthonormal_rows() {
        let q = orthogonal_init::<f64>(&[4, 2, 3, 3], 2);
        assert!(gram(&q, 4, 18, true) < 1e-5);
    }

    #[test]
    fn tall_has_orthonormal_columns() {
        let q = orthogonal_init::<f64>(&[10, 3], 3);
        assert!(gram(&q, 10, 3, false) < 1e-5);
    }

    #[test]
    fn same_seed_same_matrix() {
        assert_eq!(orthogonal_init::<f32>(&[5, 7], 9), orthogonal_init::<f32>(&[5, 7], 9));
        assert_ne!(orthogonal_init::<f32>(&[5, 7], 9), orthogonal_init::<f32>(&[5, 7], 10));
    }
}

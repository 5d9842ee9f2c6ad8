//! Channel-wise batch standardization.

use super::super::{invalid, Element, Result, Var};
use super::super::Tensor;

/// The small constant under the square root of the batch standard deviation.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// `(μ_c, σ_c)` of an `N×C×…` tensor with `σ_c = sqrt(var_c + ε)`,
/// computed without recording.
pub fn batch_stats_values<T: Element>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let tape = super::super::Tape::new();
    let (mu, sigma) = tape.constant(x.clone()).batch_stats()?;
    let (mu, sigma) = (mu.value(), sigma.value());
    Ok((mu.data().to_vec(), sigma.data().to_vec()))
}

impl<'t, T: Element> Var<'t, T> {
    /// Per-channel batch mean and standard deviation over `(n, h, w)`.
    ///
    /// The statistics span the whole tensor handed in, so callers that split
    /// work must pass the full logical batch.
    pub fn batch_stats(&self) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = self.shape();
        if shape.len() < 2 || shape.iter().product::<usize>() == 0 {
            return Err(invalid("batch_stats", format!("empty or rank < 2 input {shape:?}")));
        }
        let mu = self.channel_mean()?;
        let centered = self.sub(&mu)?;
        let var = centered.square().channel_mean()?;
        let sigma = var.add_scalar(BATCH_NORM_EPS).sqrt();
        Ok((mu, sigma))
    }

    /// `(x − μ_c) / σ_c`.
    pub fn standardize(&self) -> Result<Var<'t, T>> {
        let (mu, sigma) = self.batch_stats()?;
        self.sub(&mu)?.div(&sigma)
    }
}

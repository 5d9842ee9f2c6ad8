//! Frozen random-feature network used by the perceptual loss and the
//! diversity measure.

use crate::tensor::{Element, Result, Tape, Tensor, Var};

use super::{conv, Ctx, ParamStore};

/// Fixed initialization seed; the extractor is never trained.
pub const EXTRACTOR_SEED: u64 = 0x1517_a0f3_5eed_0001;
const WIDTHS: [usize; 3] = [16, 32, 64];

/// Three conv+relu stages with 2× average pooling between them, all weights
/// orthogonally initialized from [`EXTRACTOR_SEED`].
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Element> {
    store: ParamStore<T>,
}

impl<T: Element> Default for FeatureExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> FeatureExtractor<T> {
    pub fn new() -> Self {
        let mut store = ParamStore::new(EXTRACTOR_SEED);
        let mut c_in = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let name = format!("extractor.{i}.w");
            store.insert(&name, super::orthogonal_init(&[w, c_in, 3, 3], super::name_hash(&name) ^ EXTRACTOR_SEED));
            store.insert(&format!("extractor.{i}.b"), Tensor::zeros(&[w]));
            c_in = w;
        }
        FeatureExtractor { store }
    }

    pub fn stages(&self) -> usize {
        WIDTHS.len()
    }

    /// Stage outputs for an `N×3×H×W` image batch (`H`, `W` divisible by 4).
    pub fn features<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let ctx = Ctx::new(tape, &self.store, false);
        let mut h = *x;
        let mut out = Vec::with_capacity(WIDTHS.len());
        for i in 0..WIDTHS.len() {
            if i > 0 {
                h = h.avg_pool2()?;
            }
            h = conv(&ctx, &format!("extractor.{i}"), &h)?.relu();
            out.push(h);
        }
        Ok(out)
    }

    pub fn feature_values(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        Ok(self.features(&tape, &v)?.iter().map(|f| (*f.value()).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_is_deterministic_and_shaped() {
        let a = FeatureExtractor::<f32>::new();
        let b = FeatureExtractor::<f32>::new();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i % 17) as f32 / 8.0) - 1.0);
        let fa = a.feature_values(&x).unwrap();
        let fb = b.feature_values(&x).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa[0].shape(), &[2, 16, 16, 16]);
        assert_eq!(fa[2].shape(), &[2, 64, 4, 4]);
    }
}

//! Named parameters, their binding onto a tape, and the basic layers.

mod extractor;
pub mod init;
pub mod spectral;

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::rng;
use crate::tensor::{Conv2dSpec, Element, Result, Tape, Tensor, Var};

pub use extractor::FeatureExtractor;
pub use init::orthogonal_init;
pub use spectral::{spectral_normalize, SpectralState};

/// Stable 64-bit hash of a parameter name, used to give every parameter its
/// own initialization stream.
pub fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// All tensors of one network, keyed by dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element> {
    params: BTreeMap<String, Tensor<T>>,
    spectral: BTreeMap<String, SpectralState<T>>,
    seed: u64,
}

impl<T: Element> ParamStore<T> {
    /// Empty store whose initializers derive their streams from `seed`.
    pub fn new(seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), spectral: BTreeMap::new(), seed }
    }

    fn stream(&self, name: &str) -> u64 {
        rng::split(self.seed, name_hash(name))
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.params.insert(name.to_string(), value);
    }

    /// Inserts an orthogonally initialized weight that is spectrally
    /// normalized on use.
    pub fn insert_normalized(&mut self, name: &str, shape: &[usize]) {
        let w = orthogonal_init(shape, self.stream(name));
        let state = SpectralState::new(&w, self.stream(&format!("{name}#u")));
        self.params.insert(name.to_string(), w);
        self.spectral.insert(name.to_string(), state);
    }

    /// Weight `[fan_in, fan_out]` and zero bias for a fully connected layer.
    pub fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert_normalized(&format!("{prefix}.w"), &[fan_in, fan_out]);
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Kernel `[out, in, k, k]` and zero bias.
    pub fn add_conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.insert_normalized(&format!("{prefix}.w"), &[c_out, c_in, k, k]);
        self.insert(&format!("{prefix}.b"), Tensor::zeros(&[c_out]));
    }

    /// Orthogonally initialized tensor without spectral normalization.
    pub fn add_embedding(&mut self, name: &str, rows: usize, cols: usize) {
        let t = orthogonal_init(&[rows, cols], self.stream(name));
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn spectral(&self) -> &BTreeMap<String, SpectralState<T>> {
        &self.spectral
    }

    pub fn spectral_mut(&mut self) -> &mut BTreeMap<String, SpectralState<T>> {
        &mut self.spectral
    }

    /// One power iteration for every normalized weight.
    pub fn refresh_spectral(&mut self) {
        for (name, state) in self.spectral.iter_mut() {
            state.refresh(&self.params[name]);
        }
    }

    /// Exact leading singular pair for every normalized weight.
    pub fn refresh_spectral_exact(&mut self) {
        for (name, state) in self.spectral.iter_mut() {
            state.refresh_exact(&self.params[name]);
        }
    }

    /// The weight as the network sees it: spectrally normalized if it is
    /// registered for normalization.
    pub fn effective(&self, name: &str) -> Option<Tensor<T>> {
        let w = self.params.get(name)?;
        Some(match self.spectral.get(name) {
            Some(s) => {
                let inv = T::of(1.0 / s.sigma(w).as_f64().max(spectral::SIGMA_FLOOR));
                w.map(|x| x * inv)
            }
            None => w.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            spectral: self
                .spectral
                .iter()
                .map(|(k, s)| {
                    let c = |x: &[T]| x.iter().map(|&v| U::of(v.as_f64())).collect();
                    (k.clone(), SpectralState { u: c(&s.u), v: c(&s.v) })
                })
                .collect(),
            seed: self.seed,
        }
    }
}

/// Binds a [`ParamStore`] onto a tape for one forward pass.
///
/// Parameters are recorded lazily the first time they are used. With
/// `trainable` they are gradient-carrying leaves, otherwise constants.
pub struct Ctx<'t, 's, T: Element> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t, T>>>,
    weights: RefCell<BTreeMap<String, Var<'t, T>>>,
}

impl<'t, 's, T: Element> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
            weights: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Uses `var` in place of the stored tensor `name` for this pass.
    pub fn bind(&self, name: &str, var: Var<'t, T>) {
        self.bound.borrow_mut().insert(name.to_string(), var);
        self.weights.borrow_mut().remove(name);
    }

    /// The raw parameter.
    pub fn param(&self, name: &str) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = if self.trainable { self.tape.leaf(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// The parameter after spectral normalization (if registered). The
    /// gradient flows through `σ̂ = Σ W ⊙ u vᵀ` with `u`, `v` held fixed.
    pub fn weight(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.weights.borrow().get(name) {
            return Ok(*v);
        }
        let w = self.param(name);
        let out = match self.store.spectral.get(name) {
            Some(state) => {
                let sigma = w.mul_const(&state.outer(&w.value()))?.sum().clamp_min(spectral::SIGMA_FLOOR);
                w.div(&sigma)?
            }
            None => w,
        };
        self.weights.borrow_mut().insert(name.to_string(), out);
        Ok(out)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// `x·W + b` for `x` of shape `N×fan_in`.
pub fn linear<'t, T: Element>(ctx: &Ctx<'t, '_, T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(&ctx.weight(&format!("{prefix}.w"))?)?
        .add(&ctx.param(&format!("{prefix}.b")))
}

/// Convolution plus per-channel bias; "same" padding for odd kernels.
pub fn conv<'t, T: Element>(ctx: &Ctx<'t, '_, T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let w = ctx.weight(&format!("{prefix}.w"))?;
    let k = w.shape()[2];
    x.conv2d(&w, Conv2dSpec::same(k))?.add(&ctx.param(&format!("{prefix}.b")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;

    #[test]
    fn ctx_binds_once_and_collects_gradients() {
        let mut store = ParamStore::<f64>::new(3);
        store.add_linear("fc", 4, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::ones(&[3, 4]));
        let y = linear(&ctx, "fc", &x).unwrap();
        let y2 = linear(&ctx, "fc", &x).unwrap();
        tape.backward(y.add(&y2).unwrap().sum()).unwrap();
        let g = ctx.gradients();
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["fc.b", "fc.w"]);
        assert_eq!(g["fc.b"].data(), &[6.0, 6.0]);
    }

    #[test]
    fn frozen_ctx_has_no_gradients() {
        let mut store = ParamStore::<f64>::new(3);
        store.add_conv("c", 2, 3, 3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let x = tape.leaf(Tensor::ones(&[1, 2, 4, 4]));
        let y = conv(&ctx, "c", &x).unwrap().sum();
        tape.backward(y).unwrap();
        assert!(ctx.gradients().is_empty());
        assert!(x.grad().is_some());
    }

    #[test]
    fn normalized_weight_matches_store_and_passes_grad_check() {
        let mut store = ParamStore::<f64>::new(5);
        store.insert_normalized("w", &[3, 4]);
        store.insert("w", Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
        for _ in 0..3 {
            store.refresh_spectral();
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let w = ctx.weight("w").unwrap();
        assert!(w.value().max_abs_diff(&store.effective("w").unwrap()) < 1e-12);

        let state = store.spectral()["w"].clone();
        let w0 = store.get("w").unwrap().clone();
        let r = grad_check_many(
            |_, xs| {
                let sigma = xs[0].mul_const(&state.outer(&xs[0].value()))?.sum();
                Ok(xs[0].div(&sigma)?.tanh().sum())
            },
            &[w0],
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

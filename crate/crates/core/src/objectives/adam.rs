use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

use super::ObjectiveError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter in `params`. Parameters without an
    /// entry in `grads` are treated as having zero gradient.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(), ObjectiveError> {
        if let Some(name) = grads.keys().find(|k| params.get(k).is_none()) {
            return Err(ObjectiveError::Optimizer(format!("gradient for unknown parameter `{name}`")));
        }
        for (name, g) in grads {
            if g.shape() != params.get(name).expect("checked").shape() {
                return Err(ObjectiveError::Optimizer(format!("gradient shape mismatch for `{name}`")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(ObjectiveError::Optimizer(format!("moment shape mismatch for `{name}`")));
            }
            let g = grads.get(&name);
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                pd[i] = T::of(pd[i].as_f64() - delta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.insert("w", Tensor::from_f64(&[values.len()], values).unwrap());
        s
    }

    fn grads(values: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_f64(&[values.len()], values).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_parameters_but_counts_the_step() {
        let mut p = store(&[0.5, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = store(&[0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &grads(&[1.0])).unwrap();
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn update_opposes_gradient_sign() {
        let g = [3.0, -0.2, 1e-6, -7.0, 0.0];
        let mut p = store(&[0.0; 5]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &grads(&g)).unwrap();
        for (&d, gi) in p.get("w").unwrap().data().iter().zip(g) {
            if gi == 0.0 {
                assert_eq!(d, 0.0);
            } else {
                assert_eq!(d.signum(), -gi.signum());
            }
        }
    }

    #[test]
    fn quadratic_loss_decreases() {
        let loss = |p: &ParamStore<f64>| p.get("w").unwrap().data().iter().map(|x| (x - 1.0).powi(2)).sum::<f64>();
        let mut p = store(&[3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        let mut last = loss(&p);
        for _ in 0..2 {
            let g: Vec<f64> = p.get("w").unwrap().data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.update(&mut p, &grads(&g)).unwrap();
            let now = loss(&p);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn rejects_unknown_or_misshaped_gradients() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut bad = grads(&[1.0, 2.0]);
        bad.insert("x".into(), Tensor::zeros(&[1]));
        assert!(opt.update(&mut p, &bad).is_err());
        assert!(opt.update(&mut p, &grads(&[1.0])).is_err());
        assert_eq!(opt.step, 0);
    }
}

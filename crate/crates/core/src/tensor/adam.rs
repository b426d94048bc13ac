use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParameterStore};
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Multiplies the base learning rate by `factor` once every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub period: usize,
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch / self.period.max(1)) as i32)
    }
}

/// Moments, step counter and current learning rates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub(crate) m: Vec<Vec<F>>,
    pub(crate) v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    /// Fresh state with zero moments shaped like `store`.
    pub fn new(
        store: &ParameterStore<F>,
        config: AdamConfig,
        lr_encoder: f64,
        lr_decoder: f64,
    ) -> Self {
        let zeros: Vec<Vec<F>> = store
            .iter()
            .map(|(_, t, _)| vec![F::zero(); t.len()])
            .collect();
        AdamState {
            config,
            step: 0,
            lr_encoder,
            lr_decoder,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        lr_encoder: f64,
        lr_decoder: f64,
        m: Vec<Vec<F>>,
        v: Vec<Vec<F>>,
    ) -> Self {
        AdamState {
            config,
            step,
            lr_encoder,
            lr_decoder,
            m,
            v,
        }
    }

    pub fn set_learning_rates(&mut self, encoder: f64, decoder: f64) -> Result<()> {
        if !(encoder > 0.0 && decoder > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rates must be positive, got {encoder} / {decoder}"
            )));
        }
        self.lr_encoder = encoder;
        self.lr_decoder = decoder;
        Ok(())
    }

    /// One bias-corrected Adam update of every trainable parameter, then
    /// zeroes the gradients.
    pub fn step(&mut self, store: &mut ParameterStore<F>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let t = store.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has no gradient",
                    store.name(id)
                )));
            }
            if self.m[id.0].len() != t.len() {
                return Err(Error::shape("adam_step", &[self.m[id.0].len()], t.shape()));
            }
        }
        self.step += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1f, b2f) = (F::from_f64_lossy(b1), F::from_f64_lossy(b2));
        let eps = F::from_f64_lossy(self.config.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let lr = match store.group(id) {
                ParamGroup::Encoder => self.lr_encoder,
                ParamGroup::Decoder => self.lr_decoder,
                ParamGroup::Buffer => continue,
            };
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().unwrap().to_vec();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let step_size = F::from_f64_lossy(lr / bc1);
            let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
            for (((p, &g), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1f * *mi + (F::one() - b1f) * g;
                *vi = b2f * *vi + (F::one() - b2f) * g * g;
                *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(v), ParamGroup::Encoder)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(0.7);
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3, 1e-3);
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.by_name("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn unit_gradient_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let id = store.id("w").unwrap();
        store.get_mut(id).grad_mut().unwrap()[0] = 1.0;
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3, 1e-3);
        adam.step(&mut store).unwrap();
        let delta = store.get(id).data()[0];
        assert!((delta + 1e-3).abs() < 1e-8, "delta {delta}");
        assert_eq!(store.get(id).grad().unwrap()[0], 0.0);
    }

    #[test]
    fn step_decay_halves_every_period() {
        let d = StepDecay {
            factor: 0.5,
            period: 200,
        };
        assert_eq!(d.lr_at(1e-3, 0), 1e-3);
        assert_eq!(d.lr_at(1e-3, 199), 1e-3);
        assert_eq!(d.lr_at(1e-3, 200), 5e-4);
        assert_eq!(d.lr_at(1e-3, 400), 2.5e-4);
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3, 1e-3);
        let mut bigger = scalar_store(0.0);
        bigger
            .insert("b", Tensor::scalar(1.0), ParamGroup::Decoder)
            .unwrap();
        assert!(matches!(adam.step(&mut bigger), Err(Error::Contract(_))));
    }

    #[test]
    fn nonpositive_learning_rate_is_rejected() {
        let store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3, 1e-3);
        assert!(adam.set_learning_rates(0.0, 1e-3).is_err());
    }
}

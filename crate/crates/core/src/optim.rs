//! First-order optimisers over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam with bias-corrected moments.
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update for every named gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = T::of(1.0 - b1.powi(t));
        let bc2 = T::of(1.0 - b2.powi(t));
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.eps);
        let (b1, b2) = (T::of(b1), T::of(b2));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::from_vec(&[2], vec![0.3, -1.7]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![5.0, -2.0]).unwrap());
        for _ in 0..10 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let x = store.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_vec(&[1], vec![2.0 * (x - 1.0)]).unwrap());
            adam.step(&mut store, &grads).unwrap();
        }
        assert!((store.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }
}

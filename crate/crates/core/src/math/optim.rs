use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::real::Real;
use crate::math::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update to every `(name, param)` pair.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name}: {:?} vs param {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::c(beta1), T::c(beta2));
        let (ob1, ob2) = (T::c(1.0 - beta1), T::c(1.0 - beta2));
        for ((name, p), g) in params.into_iter().zip(grads) {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() {
                return Err(Error::Shape("moment shape changed between steps".into()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = mi.f64() / c1;
                let vhat = vi.f64() / c2;
                *pi -= T::c(lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }

    /// Moment tensors in name order, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor<T>, &Tensor<T>)> {
        self.first
            .iter()
            .map(move |(k, m)| (k, m, &self.second[k]))
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        moments: Vec<(String, Tensor<T>, Tensor<T>)>,
    ) -> Self {
        let mut s = AdamState::new(config);
        s.step = step;
        for (k, m, v) in moments {
            s.first.insert(k.clone(), m);
            s.second.insert(k, v);
        }
        s
    }
}

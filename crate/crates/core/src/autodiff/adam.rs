use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moments are created lazily the first time a
/// parameter receives a gradient; after that a missing gradient counts as zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        // validate before touching anything so a bad batch leaves state intact
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("`{}` is {:?}, gradient {:?}", store.name(id), store.get(id).shape(), g.shape()),
                    ));
                }
            }
        }
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = grads.param(id);
            let slot = &mut self.moments[id.index()];
            if slot.is_none() {
                if grad.is_none() {
                    continue;
                }
                let shape = store.get(id).shape().to_vec();
                *slot = Some((Tensor::zeros(&shape), Tensor::zeros(&shape)));
            }
            let (m, v) = slot.as_mut().expect("initialized above");
            let param = store.get_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..param.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

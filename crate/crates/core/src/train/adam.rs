//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter in `store`. Nothing is modified if a
    /// gradient is missing, misshaped or non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in store.iter().zip(grads).zip(&self.m) {
            if g.shape() != m.shape() {
                return Err(Error::shape("adam", g.shape(), m.shape()));
            }
            if !g.is_finite() {
                log::error!("non-finite gradient for {}", p.name);
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in store.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let w = p.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k].as_f64();
                let mk = self.beta1 * m.data()[k].as_f64() + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k].as_f64() + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = T::from_f64(mk);
                v.data_mut()[k] = T::from_f64(vk);
                let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
                w[k] = T::from_f64(w[k].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<T: Real>(groups: &[&[Tensor<T>]]) -> f64 {
    groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(groups: &mut [&mut Vec<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&[Tensor<T>]> = groups.iter().map(|g| g.as_slice()).collect();
        global_norm(&views)
    };
    if norm > max_norm && norm.is_finite() {
        let k = T::from_f64(max_norm / norm);
        for g in groups.iter_mut() {
            for t in g.iter_mut() {
                t.scale(k);
            }
        }
    }
    norm
}

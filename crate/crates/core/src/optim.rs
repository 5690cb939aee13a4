//! Adam with per-name state and the pretraining learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-6
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// State is created only for names that receive a gradient, so frozen
/// parameters never cost optimizer memory.
pub struct Adam<F> {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &BTreeMap<String, Tensor<F>>, lr: f64) -> Result<()> {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![F::zero(); g.len()],
                v: vec![F::zero(); g.len()],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
            let step = F::from_f64(lr / c1);
            let c2s = F::from_f64(c2.sqrt());
            let eps = F::from_f64(self.cfg.eps);
            let mut data = p.to_vec();
            for (((x, &gi), m), v) in data.iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = fb1 * *m + (F::one() - fb1) * gi;
                *v = fb2 * *v + (F::one() - fb2) * gi * gi;
                *x -= step * *m / (v.sqrt() / c2s + eps);
            }
            params.set(name, Tensor::new(p.shape().to_vec(), data)?)?;
        }
        Ok(())
    }

    /// Names holding optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.state.keys()
    }

    /// Bytes of first and second moment buffers.
    pub fn state_bytes(&self) -> usize {
        self.state.values().map(|s| (s.m.len() + s.v.len()) * F::DTYPE.size()).sum()
    }
}

/// Scales gradients so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * F::from_f64(s));
        }
    }
    norm
}

pub fn grad_norm<F: Float>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Linear warmup over the first `warmup_frac` of updates, then linear decay
/// to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupLinear {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl WarmupLinear {
    pub fn lr(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.warmup_frac * total).max(1.0);
        let s = step as f64;
        if s < warm {
            self.max_lr * (s + 1.0) / warm
        } else {
            self.max_lr * ((total - s) / (total - warm).max(1.0)).clamp(0.0, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("encoder.mask_embedding", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let g = BTreeMap::from([("encoder.mask_embedding".to_string(), Tensor::new(vec![2], vec![0.5, -3.0]).unwrap())]);
        let mut adam = Adam::new(AdamConfig { eps: 0.0, ..AdamConfig::default() });
        adam.step(&mut p, &g, 0.1).unwrap();
        let v = p.get("encoder.mask_embedding").unwrap().data().to_vec();
        assert!((v[0] - 0.9).abs() < 1e-12 && (v[1] + 0.9).abs() < 1e-12);
        assert_eq!(adam.state_bytes(), 2 * 2 * 8);
    }

    #[test]
    fn warmup_then_decay() {
        let s = WarmupLinear { max_lr: 1.0, warmup_frac: 0.08, total_steps: 100 };
        assert!((s.lr(7) - 1.0).abs() < 1e-12);
        assert!(s.lr(0) < s.lr(3));
        assert!((s.lr(54) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}

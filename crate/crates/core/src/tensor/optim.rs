use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

/// Global L2 norm of every present gradient across `stores`.
pub fn global_grad_norm(stores: &[&mut ParamStore]) -> f32 {
    let sq: f64 = stores
        .iter()
        .flat_map(|s| s.iter())
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    sq.sqrt() as f32
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm(stores: &mut [&mut ParamStore], max_norm: f32) -> f32 {
    let norm = global_grad_norm(stores);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm as f64 / norm as f64) as f32;
        for store in stores.iter_mut() {
            store.scale_grads(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias correction. Moments are kept
/// only for trainable tensors, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    /// Applies one update to every trainable tensor in `stores`.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], lr: f32) -> Result<()> {
        for store in stores.iter() {
            for (name, t) in store.iter() {
                if t.requires_grad && t.grad.is_none() {
                    return Err(TensorError::MissingGrad(name.to_string()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        for store in stores.iter_mut() {
            for (name, t) in store.iter_mut() {
                if !t.requires_grad {
                    continue;
                }
                let n = t.numel();
                let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let grad = t.grad.take().expect("checked above");
                let data = t.data_mut();
                for i in 0..n {
                    let g = grad[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let mhat = m[i] as f64 / bc1;
                    let vhat = v[i] as f64 / bc2;
                    let p = data[i] as f64 * (1.0 - lr as f64 * c.weight_decay as f64);
                    data[i] = (p - lr as f64 * mhat / (vhat.sqrt() + c.eps as f64)) as f32;
                }
                t.grad = Some(grad);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(name: &str, value: f32, grad: f32, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(value).with_requires_grad(trainable);
        t.grad = Some(vec![grad]);
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn clip_examples() {
        let mut s = ParamStore::new();
        let mut t = Tensor::vector(vec![0.0, 0.0]).unwrap().with_requires_grad(true);
        t.grad = Some(vec![3.0, 4.0]);
        s.insert("p", t).unwrap();
        assert_eq!(clip_grad_norm(&mut [&mut s], 10.0), 5.0);
        assert_eq!(s.get("p").unwrap().grad.as_deref(), Some(&[3.0, 4.0][..]));
        assert_eq!(clip_grad_norm(&mut [&mut s], 1.0), 5.0);
        let g = s.get("p").unwrap().grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);

        let mut z = store_with("z", 1.0, 0.0, true);
        assert_eq!(clip_grad_norm(&mut [&mut z], 1.0), 0.0);
        assert_eq!(z.get("z").unwrap().grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn frozen_param_is_untouched() {
        let mut s = store_with("frozen", 0.5, 3.0, false);
        let before = s.get("frozen").unwrap().to_le_bytes();
        let mut opt = AdamW::default();
        opt.step(&mut [&mut s], 0.1).unwrap();
        assert_eq!(s.get("frozen").unwrap().to_le_bytes(), before);
        assert!(opt.moments("frozen").is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with("p", 0.0, 1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut [&mut s], 1e-3).unwrap();
        // mhat = vhat = 1, so the update is lr / (1 + eps)
        let p = s.get("p").unwrap().item();
        assert!((p + 1e-3).abs() < 1e-9, "{p}");
    }

    #[test]
    fn zero_lr_only_moves_moments() {
        let mut s = store_with("p", 0.25, 2.0, true);
        let mut opt = AdamW::default();
        opt.step(&mut [&mut s], 0.0).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 0.25);
        let (m, v) = opt.moments("p").unwrap();
        assert!((m[0] - 0.2).abs() < 1e-7);
        assert!((v[0] - 0.004).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0).with_requires_grad(true)).unwrap();
        let mut opt = AdamW::default();
        assert_eq!(
            opt.step(&mut [&mut s], 0.1).unwrap_err(),
            TensorError::MissingGrad("p".into())
        );
        assert_eq!(opt.step_count(), 0);
    }
}

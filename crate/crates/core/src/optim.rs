//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::layers::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    skipped: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            skipped: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Steps refused because some gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without a gradient are treated as having a zero gradient. Returns
    /// `false` (and changes nothing) if any gradient is non-finite.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64) -> bool {
        let finite = store
            .params()
            .all(|(_, p)| p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !finite {
            self.skipped += 1;
            return false;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in store.params_mut() {
            let n = p.numel();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.f64()).collect(),
                None => vec![0.0; n],
            };
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                let mut x = w.f64() * (1.0 - lr * c.weight_decay);
                x -= lr * m_hat / (v_hat.sqrt() + c.eps);
                *w = T::of(x);
            }
        }
        true
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let sq: f64 = store
        .params()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in store.params_mut() {
            if let Some(g) = p.take_grad() {
                let scaled: Vec<T> = g.iter().map(|v| T::of(v.f64() * scale)).collect();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store(1.5);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        s.param_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        assert!(opt.step(&mut s, 1e-3));
        assert_eq!(s.param("w").unwrap().item(), 1.5);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, 0.1);
        }
        let expect = 2.0 * (1.0f64 - 0.1 * 1e-2).powi(5);
        assert!((s.param("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_step_is_skipped() {
        let mut s = store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        s.param_mut("w").unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        assert!(!opt.step(&mut s, 0.1));
        assert_eq!((opt.skipped(), opt.steps()), (1, 0));
        assert_eq!(s.param("w").unwrap().item(), 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::<f64>::new();
        s.add_param("a", Tensor::zeros(&[2])).unwrap();
        s.param_mut("a").unwrap().accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        let g = s.param("a").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}

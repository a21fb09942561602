//! Named parameter sets and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Param {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// A map from parameter name to tensor, plus per-parameter Adam moments and
/// a shared step counter. Iteration is always in sorted name order
/// (BTreeMap), which keeps updates and checkpoints deterministic.
#[derive(Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(name.into(), Param { value, m, v });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    /// Panics if absent; for the fixed architectures here a missing name is
    /// a programming error, not a data error.
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.entries[name].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// Gradients keyed like a [`ParamSet`].
#[derive(Default)]
pub struct Grads {
    entries: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `g` into the accumulated gradient for `name`.
    pub fn accumulate(&mut self, name: &str, g: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            None => {
                self.entries.insert(name.into(), g);
            }
            Some(acc) => {
                if acc.shape() != g.shape() {
                    return Err(Error::Shape {
                        op: "grads_accumulate",
                        detail: format!("{name}: {:?} vs {:?}", acc.shape(), g.shape()),
                    });
                }
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.entries
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every parameter, in name order.
/// Every parameter must have a gradient of matching shape.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
    for (name, p) in &params.entries {
        match grads.get(name) {
            None => {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("missing gradient for {name}"),
                })
            }
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("{name}: grad {:?} vs param {:?}", g.shape(), p.value.shape()),
                })
            }
            Some(_) => {}
        }
    }
    params.step += 1;
    let t = params.step;
    // Bias corrections computed once in f64, then fixed to f32.
    let c1 = (1.0 - libm::pow(cfg.beta1 as f64, t as f64)) as f32;
    let c2 = (1.0 - libm::pow(cfg.beta2 as f64, t as f64)) as f32;
    for (name, p) in params.entries.iter_mut() {
        let g = grads.get(name).unwrap();
        for i in 0..p.value.len() {
            let gi = g.data()[i];
            let m = cfg.beta1 * p.m.data()[i] + (1.0 - cfg.beta1) * gi;
            let v = cfg.beta2 * p.v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            p.value.data_mut()[i] -= cfg.lr * m_hat / (libm::sqrtf(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_param(v: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_grad_leaves_fresh_params_unchanged() {
        let mut p = one_param(3.5);
        let mut g = Grads::new();
        g.accumulate("w", Tensor::zeros(&[1])).unwrap();
        adam_step(&mut p, &g, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensor("w").data(), &[3.5]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // p=1, g=1, lr=0.1: bias-corrected first step moves by lr/(1+eps).
        let mut p = one_param(1.0);
        let mut g = Grads::new();
        g.accumulate("w", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &cfg).unwrap();
        let got = p.tensor("w").data()[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn identical_state_gives_bitwise_identical_updates() {
        let run = || {
            let mut p = ParamSet::new();
            p.insert("a", Tensor::from_vec(&[2], vec![0.5, -1.25]).unwrap());
            p.insert("b", Tensor::from_vec(&[1], vec![2.0]).unwrap());
            let mut g = Grads::new();
            g.accumulate("a", Tensor::from_vec(&[2], vec![0.3, 0.7]).unwrap())
                .unwrap();
            g.accumulate("b", Tensor::from_vec(&[1], vec![-0.1]).unwrap())
                .unwrap();
            for _ in 0..5 {
                adam_step(&mut p, &g, &AdamConfig::default()).unwrap();
            }
            (p.tensor("a").data().to_vec(), p.tensor("b").data().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_grad_shape_is_rejected() {
        let mut p = one_param(1.0);
        let mut g = Grads::new();
        g.accumulate("w", Tensor::zeros(&[2])).unwrap();
        assert!(adam_step(&mut p, &g, &AdamConfig::default()).is_err());
        let empty = Grads::new();
        assert!(adam_step(&mut p, &empty, &AdamConfig::default()).is_err());
    }
}

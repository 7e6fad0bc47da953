use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    grad: Option<Vec<f32>>,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Named trainable tensors with Adam moment buffers. Iteration is in name
/// order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.slots.insert(
            name,
            Slot {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Overwrites a parameter's values; the shape must stay the same.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: slot.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.slots.get(name).and_then(|s| s.grad.as_deref())
    }

    pub(crate) fn set_grad(&mut self, name: &str, grad: Vec<f32>) {
        if let Some(slot) = self.slots.get_mut(name) {
            debug_assert_eq!(slot.value.len(), grad.len());
            slot.grad = Some(grad);
        }
    }

    pub fn clear_grads(&mut self) {
        self.slots.values_mut().for_each(|s| s.grad = None);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Consumes the stored gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.slots.iter().find(|(_, s)| s.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let step_size = (cfg.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for slot in self.slots.values_mut() {
            let grad = slot.grad.take().expect("checked above");
            let w = slot.value.data_mut();
            for i in 0..w.len() {
                let g = grad[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let denom = slot.v[i].sqrt() / bc2_sqrt + cfg.eps;
                w[i] -= step_size * slot.m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Deterministic initializer keyed by a seed.
pub struct Initializer {
    rng: ChaCha8Rng,
    /// negative slope of the activation that follows each layer
    pub leaky_slope: f32,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            leaky_slope: 0.2,
        }
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / ((1 + a^2) fan_in))`.
    pub fn kaiming_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let a = self.leaky_slope;
        let bound = (6.0 / ((1.0 + a * a) * fan_in.max(1) as f32)).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Uniform with an explicit bound, for output layers.
    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }
}

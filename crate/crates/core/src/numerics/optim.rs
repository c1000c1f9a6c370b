use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::graph::Gradients;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug)]
struct Slot {
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    first: Tensor,
    second: Tensor,
    frozen: bool,
}

/// Hyperparameters of the Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their Adam moment buffers.
///
/// Names are kept in sorted order so iteration, checkpoints and updates are
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape().to_vec();
        self.slots.insert(
            name.to_string(),
            Slot {
                value: Arc::new(value),
                grad: None,
                first: Tensor::zeros(&shape),
                second: Tensor::zeros(&shape),
                frozen: false,
            },
        );
    }

    /// Registers a parameter drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.slots
            .get(name)
            .map(|s| s.value.as_ref())
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub(crate) fn shared(&self, name: &str) -> Result<Arc<Tensor>, NumericsError> {
        self.slots
            .get(name)
            .map(|s| Arc::clone(&s.value))
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    /// Overwrites a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set",
                left: slot.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), s.value.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Excludes every parameter whose name starts with `prefix` from updates.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, slot) in self.slots.iter_mut() {
            if name.starts_with(prefix) {
                slot.frozen = frozen;
            }
        }
    }

    /// Resets every gradient buffer to zero.
    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = Some(Tensor::zeros(slot.value.shape()));
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).and_then(|s| s.grad.as_ref())
    }

    /// Adds the gradients of every parameter the graph read. Parameters the
    /// loss did not reach receive zeros.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), NumericsError> {
        for (name, id) in grads.params() {
            let id = *id;
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParameter(name.clone()))?;
            let buf = slot
                .grad
                .get_or_insert_with(|| Tensor::zeros(slot.value.shape()));
            if let Some(g) = grads.get_id(id) {
                for (b, v) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += v;
                }
            }
        }
        Ok(())
    }

    /// Multiplies every gradient buffer by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for slot in self.slots.values_mut() {
            if let Some(g) = slot.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// One bias-corrected Adam update over every non-frozen parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), NumericsError> {
        if let Some((name, _)) = self
            .slots
            .iter()
            .find(|(_, s)| !s.frozen && s.grad.is_none())
        {
            return Err(NumericsError::MissingGradient(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            if slot.frozen {
                continue;
            }
            let grad = slot.grad.as_ref().expect("checked above");
            let value = Arc::make_mut(&mut slot.value);
            let (m, v) = (slot.first.data_mut(), slot.second.data_mut());
            for (i, p) in value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Plain gradient descent over every non-frozen parameter.
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), NumericsError> {
        for (name, slot) in self.slots.iter_mut() {
            if slot.frozen {
                continue;
            }
            let grad = slot
                .grad
                .as_ref()
                .ok_or_else(|| NumericsError::MissingGradient(name.clone()))?;
            let value = Arc::make_mut(&mut slot.value);
            for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
        self.step += 1;
        Ok(())
    }
}

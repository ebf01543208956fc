use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result, TpeError};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam hyper-parameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named trainable tensors with gradient accumulators and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    lookup: BTreeMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new(), lookup: BTreeMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.lookup.contains_key(name) {
            return Err(TpeError::Config(format!("duplicate parameter {name}")));
        }
        let shape = value.shape().to_vec();
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].grad
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.slots[id.0].m, &self.slots[id.0].v)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let grad = self.slots[id.0].grad.data_mut();
        grad.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Multiplies every gradient by `c` (used to average over a batch).
    pub fn scale_grads(&mut self, c: T) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update with bias correction and decoupled weight decay; increments the shared step.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let decay = T::from_f64(cfg.lr * cfg.weight_decay);
        for s in &mut self.slots {
            let Slot { value, grad, m, v, .. } = s;
            for (((p, &g), mm), vv) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *p -= decay * *p;
                *mm = b1 * *mm + (T::one() - b1) * g;
                *vv = b2 * *vv + (T::one() - b2) * g * g;
                let mhat = *mm / c1;
                let vhat = *vv / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            if !value.is_finite() {
                return Err(TpeError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }

    /// Restores optimizer state saved alongside a checkpoint.
    pub fn set_optimizer_state(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if m.shape() != slot.value.shape() || v.shape() != slot.value.shape() {
            return Err(shape_err("set_optimizer_state", slot.name.clone()));
        }
        slot.m = m;
        slot.v = v;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Copies values (not gradients or optimizer state) into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for s in &self.slots {
            out.add(&s.name, s.value.cast()).expect("names are unique");
        }
        out.step = self.step;
        out
    }
}

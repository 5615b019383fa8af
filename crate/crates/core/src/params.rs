//! Named parameter storage with gradient accumulators.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::ChannelStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    /// `None` for non-trainable buffers such as running statistics.
    grad: Option<Tensor<T>>,
}

/// Trainable tensors and buffers, kept in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        let grad = trainable.then(|| Tensor::zeros(value.shape()));
        self.entries.push(Entry { name: name.to_owned(), value, grad });
        self.by_name.insert(name.to_owned(), id);
        id
    }

    /// Registers a trainable tensor.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    /// Registers a non-trainable buffer.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    /// Xavier/Glorot uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].grad.is_some()
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> Option<(&mut Tensor<T>, &Tensor<T>)> {
        let e = &mut self.entries[id.0];
        e.grad.as_ref().map(|g| (&mut e.value, g))
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        if let Some(acc) = self.entries[id.0].grad.as_mut() {
            acc.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            if let Some(g) = e.grad.as_mut() {
                g.fill(T::zero());
            }
        }
    }

    /// Total element count of trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.grad.is_some()).map(|e| e.value.len()).sum()
    }

    /// Replaces a value by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{name} is {:?} but the new value is {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Folds batch statistics into running buffers:
    /// `running = (1 - momentum) · running + momentum · batch`, using the
    /// unbiased variance estimate for the running variance.
    pub fn apply_running_stats(&mut self, updates: &[RunningStatsUpdate], momentum: f64) {
        for u in updates {
            let n = u.stats.count as f64;
            let correction = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            let mean = &mut self.entries[u.mean.0].value;
            for (r, &m) in mean.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = T::of((1.0 - momentum) * r.f64() + momentum * m);
            }
            let var = &mut self.entries[u.var.0].value;
            for (r, &v) in var.data_mut().iter_mut().zip(&u.stats.var) {
                *r = T::of((1.0 - momentum) * r.f64() + momentum * v * correction);
            }
        }
    }

    /// Same parameters in another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.cast(), e.grad.is_some());
        }
        out
    }
}

/// Pending update of one batch-norm layer's running buffers.
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: ChannelStats,
}

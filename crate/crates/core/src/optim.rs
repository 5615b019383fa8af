//! Adam with bias correction.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every trainable parameter, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |id: ParamId| store.is_trainable(id).then(|| Tensor::zeros(store.value(id).shape()));
        AdamState {
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One update from the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let (Some(m), Some(v)) = (self.m[id.index()].as_mut(), self.v[id.index()].as_mut()) else {
                continue;
            };
            let (value, grad) = store.value_and_grad_mut(id).expect("trainable");
            for (((p, &g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let g = g.f64();
                let m_new = b1 * mi.f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.f64() + (1.0 - b2) * g * g;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                *p = T::of(p.f64() - update);
            }
        }
    }
}

/// Applies one Adam update to `store` using its accumulated gradients.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) {
    state.step(store, lr);
}

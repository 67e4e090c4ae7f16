//! Optimizers over [`ParamStore`] parameter groups.
//!
//! The trainer keeps two groups: detection parameters (encoder + heads)
//! under AdamW, reconstruction decoder parameters under plain SGD. Each
//! optimizer only ever touches the ids it was built with, so the split is
//! structural rather than a runtime filter.

use std::collections::BTreeMap;

use super::store::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Piecewise-constant schedule: the base rate decays by `factor` at each
/// listed epoch. Epochs are 1-indexed and the drop applies from the start
/// of the named epoch onward.
pub fn lr_at_epoch(base: f64, drops: &[usize], factor: f64, epoch: usize) -> f64 {
    let n = drops.iter().filter(|&&d| epoch >= d).count();
    base * factor.powi(n as i32)
}

/// Plain SGD without momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub params: Vec<ParamId>,
}

impl Sgd {
    pub fn new(params: Vec<ParamId>) -> Self {
        Self { params }
    }

    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::from_f64_lossy(lr);
        for &id in &self.params {
            let (values, grads) = store.value_and_grad_mut(id);
            for (v, g) in values.iter_mut().zip(grads.iter()) {
                *v -= lr * *g;
            }
        }
    }
}

/// AdamW with decoupled weight decay.
///
/// Moment state lives in f64 keyed by parameter name so checkpoints can
/// carry it across the f32/f64 model types unchanged.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: Vec<ParamId>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far (shared bias-correction clock for the group).
    pub t: u64,
    state: BTreeMap<String, AdamState>,
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(params: Vec<ParamId>) -> Self {
        Self {
            params,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &id in &self.params {
            let name = store.name(id).to_string();
            let n = store.value(id).len();
            let st = self.state.entry(name).or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let (values, grads) = store.value_and_grad_mut(id);
            for i in 0..n {
                let g = grads[i].to_f64_lossy();
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let w = values[i].to_f64_lossy();
                let new = w - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w);
                values[i] = T::from_f64_lossy(new);
            }
        }
    }

    /// Serialize moment state for checkpoints.
    #[allow(clippy::type_complexity)]
    pub fn export_state(&self) -> (u64, BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        let state = self
            .state
            .iter()
            .map(|(k, s)| (k.clone(), (s.m.clone(), s.v.clone())))
            .collect();
        (self.t, state)
    }

    pub fn import_state(&mut self, t: u64, state: BTreeMap<String, (Vec<f64>, Vec<f64>)>) {
        self.t = t;
        self.state = state
            .into_iter()
            .map(|(k, (m, v))| (k, AdamState { m, v }))
            .collect();
    }
}

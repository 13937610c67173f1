use super::graph::Gradients;
use super::params::{ParamId, ParamSet};
use crate::scalar::Scalar;

/// Sums per-parameter gradients across the samples of a batch.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T> {
    sums: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        GradAccumulator { sums: vec![None; params.len()] }
    }

    pub fn add(&mut self, params: &ParamSet<T>, grads: &Gradients<T>, weight: T) {
        for id in params.ids() {
            if let Some(g) = grads.param(id) {
                let slot = self.sums[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += *v * weight);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.sums[id.index()].as_deref()
    }

    pub fn clear(&mut self) {
        self.sums.iter_mut().for_each(|s| *s = None);
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = |_: ParamId| Vec::new();
        AdamW {
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(1e-8),
            weight_decay: T::of(weight_decay),
            step: 0,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradAccumulator<T>, lr: T) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.get(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if self.m[i].is_empty() {
                self.m[i] = vec![T::zero(); g.len()];
                self.v[i] = vec![T::zero(); g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }
}

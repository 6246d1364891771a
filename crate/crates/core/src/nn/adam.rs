use serde::{Deserialize, Serialize};

use super::{Module, ParamKind};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed by parameter
/// traversal order, so a given optimizer must always see the same module.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter accepted by `select`.
    pub fn step<M: Module<T>>(&mut self, params: &mut M, grads: &M, lr: f64, select: impl Fn(ParamKind) -> bool) {
        let mut g_all: Vec<Vec<T>> = Vec::new();
        grads.visit("", &mut |_, _, _, g| g_all.push(g.to_vec()));
        if self.m.is_empty() {
            self.m = g_all.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::of(lr), T::of(self.config.eps));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_mut("", &mut |_, kind, _, p| {
            let i = idx;
            idx += 1;
            if !kind.trainable() || !select(kind) {
                return;
            }
            let (g, m, v) = (&g_all[i], &mut m_all[i], &mut v_all[i]);
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                // a zero learning rate leaves parameters bit-identical
                if lr != T::zero() {
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        });
    }
}

//! Per-parameter adaptive optimizers.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads);
}

/// Serializable optimizer state: step count plus the per-parameter moment
/// buffers, flattened in parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub steps: i32,
    pub lr: f64,
    pub slots: Vec<Vec<f64>>,
}

fn flatten(bufs: &[&[Tensor]]) -> Vec<Vec<f64>> {
    bufs.iter().flat_map(|b| b.iter().map(|t| t.data().to_vec())).collect()
}

fn unflatten(params: &ParamStore, slots: &[Vec<f64>], groups: usize) -> Option<Vec<Vec<Tensor>>> {
    if slots.is_empty() {
        return Some(vec![Vec::new(); groups]);
    }
    let n = params.len();
    if slots.len() != n * groups {
        return None;
    }
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut group = Vec::with_capacity(n);
        for (i, (_, t)) in params.iter().enumerate() {
            let data = &slots[g * n + i];
            if data.len() != t.rows() * t.cols() {
                return None;
            }
            group.push(Tensor::from_vec(t.rows(), t.cols(), data.clone()));
        }
        out.push(group);
    }
    Some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaDeltaConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

/// AdaDelta: step sizes from running RMS of updates over running RMS of
/// gradients.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    cfg: AdaDeltaConfig,
    sq_grad: Vec<Tensor>,
    sq_delta: Vec<Tensor>,
}

impl AdaDelta {
    pub fn new(cfg: AdaDeltaConfig) -> Self {
        Self {
            cfg,
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            steps: 0,
            lr: self.cfg.lr,
            slots: flatten(&[&self.sq_grad, &self.sq_delta]),
        }
    }

    /// Restores buffers exported by [`AdaDelta::state`]; `None` when they
    /// do not fit `params`.
    pub fn restore(&mut self, params: &ParamStore, state: &OptimizerState) -> Option<()> {
        let mut g = unflatten(params, &state.slots, 2)?;
        self.sq_delta = g.pop()?;
        self.sq_grad = g.pop()?;
        self.cfg.lr = state.lr;
        Some(())
    }
}

fn zeros_for(params: &ParamStore) -> Vec<Tensor> {
    params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect()
}

impl Optimizer for AdaDelta {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.sq_grad.is_empty() {
            self.sq_grad = zeros_for(params);
            self.sq_delta = zeros_for(params);
        }
        let AdaDeltaConfig { lr, rho, eps } = self.cfg;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let eg = self.sq_grad[i].data_mut();
            let ed = self.sq_delta[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                eg[j] = rho * eg[j] + (1.0 - rho) * g[j] * g[j];
                let delta = -((ed[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g[j];
                ed[j] = rho * ed[j] + (1.0 - rho) * delta * delta;
                *x += lr * delta;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            steps: self.t,
            lr: self.cfg.lr,
            slots: flatten(&[&self.m, &self.v]),
        }
    }

    pub fn restore(&mut self, params: &ParamStore, state: &OptimizerState) -> Option<()> {
        let mut g = unflatten(params, &state.slots, 2)?;
        self.v = g.pop()?;
        self.m = g.pop()?;
        self.t = state.steps;
        self.cfg.lr = state.lr;
        Some(())
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        if self.m.is_empty() {
            self.m = zeros_for(params);
            self.v = zeros_for(params);
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(opt: &mut dyn Optimizer, steps: usize) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(&[3.0, -2.0]));
        for _ in 0..steps {
            let x = store.get(id).clone();
            let g = Grads::from_tensors(vec![x.map(|v| 2.0 * v)]);
            opt.step(&mut store, &g);
        }
        store.get(id).norm_sq()
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        assert!(quadratic_descent(&mut opt, 300) < 1e-3);
    }

    #[test]
    fn adadelta_minimizes_quadratic() {
        let mut opt = AdaDelta::new(AdaDeltaConfig {
            eps: 1e-4,
            ..Default::default()
        });
        assert!(quadratic_descent(&mut opt, 3000) < 13.0 * 0.05);
    }

    #[test]
    fn restored_state_continues_identically() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(&[3.0, -2.0]));
        let grad = |s: &ParamStore| Grads::from_tensors(vec![s.get(id).map(|v| 2.0 * v)]);
        let mut a = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            let g = grad(&store);
            a.step(&mut store, &g);
        }
        let mut b = Adam::new(AdamConfig::default());
        b.restore(&store, &a.state()).unwrap();
        let (mut s1, mut s2) = (store.clone(), store.clone());
        let (g1, g2) = (grad(&s1), grad(&s2));
        a.step(&mut s1, &g1);
        b.step(&mut s2, &g2);
        assert_eq!(s1, s2);
        let mut d = AdaDelta::new(AdaDeltaConfig::default());
        let g = grad(&store);
        d.step(&mut store.clone(), &g);
        let mut e = AdaDelta::new(AdaDeltaConfig::default());
        e.restore(&store, &d.state()).unwrap();
        assert_eq!(e.state(), d.state());
        let mut bad = ParamStore::new();
        bad.add("y", Tensor::row_vector(&[1.0]));
        assert!(e.restore(&bad, &d.state()).is_none());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row_vector(&[1.0, 2.0]));
        let before = store.clone();
        let zeros = Grads::zeros_like(&store);
        Adam::new(AdamConfig::default()).step(&mut store, &zeros);
        AdaDelta::new(AdaDeltaConfig::default()).step(&mut store, &zeros);
        assert_eq!(store, before);
    }
}

//! Optimizers: momentum SGD for network weights, Adam for architecture
//! parameters, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AlphaGrad, ParamId, ParamStore};
use crate::space::{CellType, OperationKind, SearchSpace};
use crate::tensor::{Real, Tensor};

/// `lr0 · ½(1 + cos(π · epoch / total))`.
pub fn cosine_lr(epoch: f64, total: f64, lr0: f64) -> Result<f64> {
    if total <= 0.0 {
        return Err(Error::config("cosine schedule needs a positive epoch count"));
    }
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::usage(format!("epoch {epoch} outside 0..={total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch / total).cos()))
}

/// Momentum SGD: `v ← m·v + g + wd·p; p ← p − lr·v`. Parameters without a
/// gradient in a step are left untouched, velocity included.
#[derive(Debug, Clone)]
pub struct Sgd<F: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Option<Vec<F>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Option<Vec<F>>>) {
        self.velocity = v;
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", store.get(*id).name)));
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (m, lr) = (F::from_f64_lossy(self.momentum), F::from_f64_lossy(lr));
        let wd0 = F::from_f64_lossy(self.weight_decay);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.value.shape() != g.shape() {
                return Err(Error::dim(format!("gradient {:?} for parameter {} of {:?}", g.shape(), p.name, p.value.shape())));
            }
            let wd = if p.kind.decays() { wd0 } else { F::zero() };
            let v = self.velocity[id.0].get_or_insert_with(|| vec![F::zero(); g.len()]);
            for ((pv, vv), &gv) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<F: Real>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = F::from_f64_lossy(max_norm / (norm + 1e-6));
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub cell: CellType,
    pub edge: usize,
    pub kind: OperationKind,
    pub m: f64,
    pub v: f64,
}

/// Adam over the α entries of a [`SearchSpace`], keyed by
/// `(cell type, edge, operation)` so abandoned entries simply go stale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub slots: Vec<AdamSlot>,
}

impl AlphaAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AlphaAdam { lr, beta1, beta2, weight_decay, steps: 0, slots: Vec::new() }
    }

    pub fn step(&mut self, space: &mut SearchSpace, grads: &[AlphaGrad]) -> Result<()> {
        if grads.iter().any(|(_, _, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite architecture gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (cell, edge, g) in grads {
            let state = space.edge_mut(*cell, *edge);
            if state.len() != g.len() {
                return Err(Error::dim(format!("{} α gradients for {} operations", g.len(), state.len())));
            }
            for (slot, &gv) in state.slots_mut().iter_mut().zip(g) {
                let gv = gv + self.weight_decay * slot.alpha;
                let pos = match self.slots.iter().position(|s| s.cell == *cell && s.edge == *edge && s.kind == slot.kind) {
                    Some(p) => p,
                    None => {
                        self.slots.push(AdamSlot { cell: *cell, edge: *edge, kind: slot.kind, m: 0.0, v: 0.0 });
                        self.slots.len() - 1
                    }
                };
                let s = &mut self.slots[pos];
                s.m = b1 * s.m + (1.0 - b1) * gv;
                s.v = b2 * s.v + (1.0 - b2) * gv * gv;
                slot.alpha -= self.lr * (s.m / c1) / ((s.v / c2).sqrt() + 1e-8);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.0, 10.0, 0.025).unwrap(), 0.025);
        assert!(cosine_lr(10.0, 10.0, 0.025).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5.0, 10.0, 0.025).unwrap() - 0.0125).abs() < 1e-15);
        assert!(matches!(cosine_lr(0.0, 0.0, 0.025), Err(Error::Config(_))));
    }

    #[test]
    fn momentum_displacement() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", ParamKind::Conv, Tensor::new([1], vec![1.0]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.0);
        let g = vec![(id, Tensor::new([1], vec![2.0]).unwrap())];
        sgd.step(&mut store, &g, 0.1).unwrap();
        sgd.step(&mut store, &g, 0.1).unwrap();
        let moved = store.get(id).value.data()[0] - 1.0;
        assert!((moved + 0.1 * 2.0 * 2.9).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("p", ParamKind::Conv, Tensor::new([1], vec![1.0]).unwrap());
        let g = vec![(id, Tensor::new([1], vec![f32::NAN]).unwrap())];
        assert!(matches!(Sgd::new(0.9, 0.0).step(&mut store, &g, 0.1), Err(Error::Numeric(_))));
        assert_eq!(store.get(id).value.data()[0], 1.0);
    }
}

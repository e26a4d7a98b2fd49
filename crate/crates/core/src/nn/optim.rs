use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum and L2 penalty.
///
/// Per parameter: `d = g + wd·p`, `v = μ·v + d` (with `v = d` on the first
/// step), `p -= lr·v`. Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<ParamId, Tensor>, lr: f32) {
        let mut ids: Vec<_> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            if !params.kind(id).trainable() {
                continue;
            }
            let g = &grads[&id];
            let p = params.get_mut(id);
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                for (dv, pv) in d.data_mut().iter_mut().zip(p.data()) {
                    *dv += self.weight_decay * pv;
                }
            }
            let v = match self.velocity.get_mut(&id) {
                Some(v) => {
                    for (vv, dv) in v.data_mut().iter_mut().zip(d.data()) {
                        *vv = self.momentum * *vv + dv;
                    }
                    v
                }
                None => self.velocity.entry(id).or_insert(d),
            };
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= lr * vv;
            }
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor) {
        self.velocity.insert(id, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![1.0]), ParamKind::Weight);
        let mut sgd = Sgd::new(0.9, 0.1);
        let grads: HashMap<_, _> = [(id, Tensor::from_vec(&[1], vec![0.5]))].into();
        sgd.step(&mut store, &grads, 0.1);
        // d = 0.5 + 0.1 = 0.6, v = 0.6, p = 1 - 0.06
        assert!((store.get(id).data()[0] - 0.94).abs() < 1e-6);
        sgd.step(&mut store, &grads, 0.1);
        // d = 0.5 + 0.094 = 0.594, v = 0.54 + 0.594 = 1.134
        assert!((store.get(id).data()[0] - (0.94 - 0.1134)).abs() < 1e-6);
    }
}

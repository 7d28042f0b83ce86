//! SGD with heavy-ball momentum.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, Params};

#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `v = momentum * v + g; p -= lr(name) * v` for every parameter that has
    /// a gradient. Parameters with `lr(name) == 0` are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: impl Fn(&str) -> f64) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.param(name) else { continue };
            let rate = lr(name);
            if rate == 0.0 {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= rate * *vv;
            }
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

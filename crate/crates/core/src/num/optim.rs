//! AdamW with decoupled weight decay, and global gradient-norm clipping.

use super::{math, ParamStore};
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First moments, keyed like the trainable parameters.
    pub m: ParamStore,
    /// Second moments.
    pub v: ParamStore,
}

impl AdamW {
    /// Optimizer over the subset of `params` selected by `trainable`.
    pub fn new(params: &ParamStore, trainable: impl Fn(&str) -> bool, lr: f64, weight_decay: f64) -> Self {
        let m = params.filtered(trainable).zeros_like();
        let v = m.clone();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m, v }
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.m.paths().map(String::from).collect()
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.m.contains(path)
    }

    /// Applies one update to the trainable paths of `params`. Paths the
    /// optimizer does not own are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (path, m) in self.m.iter_mut() {
            let v = self.v.get_mut(path).expect("moment paths agree");
            let g = grads.get(path).expect("gradient for trainable path");
            let p = params.get_mut(path).expect("parameter for trainable path");
            let (md, vd, gd, pd) = (m.data_mut(), v.data_mut(), g.data(), p.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let update = mhat / (math::sqrt(vhat) + self.eps) + self.weight_decay * pd[i];
                pd[i] -= self.lr * update;
            }
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

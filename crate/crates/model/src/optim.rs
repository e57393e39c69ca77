use crate::params::{Gradients, ParamStore};
use crate::tensor::Mat;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.rows, p.value.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every trainable parameter; missing gradients count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let g = grads.get(id);
            let p = store.get_mut(id);
            for k in 0..p.data.len() {
                let gk = g.map_or(0.0, |g| g.data[k]);
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

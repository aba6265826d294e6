use crate::{GradStore, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One Adam update with bias correction. Parameters without a gradient still
/// see their moments decay, as with an explicit zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &GradStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id).cloned();
        let p = store.get_mut(id);
        let n = p.m.len();
        let mut upd = vec![0.0; n];
        for i in 0..n {
            let gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
            let m = &mut p.m.data_mut()[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            let mh = *m / c1;
            let v = &mut p.v.data_mut()[i];
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let vh = *v / c2;
            upd[i] = cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        if upd.iter().any(|u| *u != 0.0) {
            for (w, u) in store.value_mut(id).data_mut().iter_mut().zip(&upd) {
                *w -= u;
            }
        }
    }
}

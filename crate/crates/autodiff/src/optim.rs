use std::f64::consts::PI;

use crate::params::ParamStore;

/// Cosine decay from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * s).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update of `param` in place. `step` is 1-based.
///
/// Weight decay is decoupled: it shrinks the weights directly instead of being
/// folded into the gradient, so it never enters the moment estimates.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut MomentState,
    cfg: &AdamWConfig,
    step: u64,
) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (((w, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *w -= cfg.lr * cfg.weight_decay * *w;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// AdamW over every trainable parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    states: Vec<MomentState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let states = store.iter().map(|(_, p)| MomentState::new(p.value.len())).collect();
        Self {
            config,
            step: 0,
            states,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply the accumulated gradients. Frozen parameters are left untouched,
    /// including by weight decay.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        for ((_, p), state) in store.iter_mut().zip(self.states.iter_mut()) {
            if !p.trainable {
                continue;
            }
            adamw_update(p.value.data_mut(), &p.grad, state, &self.config, self.step);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![1.0, -2.0];
        let mut st = MomentState::new(2);
        adamw_update(&mut w, &[0.0, 0.0], &mut st, &cfg, 1);
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut w = vec![2.0];
        let mut st = MomentState::new(1);
        adamw_update(&mut w, &[0.0], &mut st, &cfg, 1);
        assert_eq!(st.m, vec![0.0]);
        assert!((w[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.square(w);
        g.backward(loss, &mut store).unwrap();
        opt.step(&mut store);
        assert!(store.get(id).value.data()[0] < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = sum_i c_i (w_i - t_i)^2, minimiser w = t
        let target = [0.5, -1.5, 2.0];
        let curv = [1.0, 3.0, 0.5];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros([3])).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        let total = 200;
        for step in 0..total {
            opt.set_lr(cosine_lr(step, total, 0.1));
            store.zero_grad();
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let t = g.constant(Tensor::vector(target.to_vec()));
            let c = g.constant(Tensor::vector(curv.to_vec()));
            let d = g.sub(w, t).unwrap();
            let d2 = g.square(d);
            let wd = g.mul(d2, c).unwrap();
            let loss = g.sum(wd);
            g.backward(loss, &mut store).unwrap();
            opt.step(&mut store);
        }
        let w = store.get(id).value.data();
        for (a, b) in w.iter().zip(target) {
            assert!((a - b).abs() < 1e-3, "{w:?}");
        }
    }
}

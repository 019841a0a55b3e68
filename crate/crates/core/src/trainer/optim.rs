use crate::error::{Error, Result};
use crate::nnblocks::{Binding, ParamId, ParamStore};
use crate::numcore::{Graph, Tensor};

/// Linear warmup then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// With `w = warmup_fraction · total_steps`: `base·step/w` before `w`,
    /// `base·½(1 + cos(π(step − w)/(total − w)))` from `w` on.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Usage(format!(
                "step {step} outside 0..={}",
                self.total_steps
            )));
        }
        let s = step as f64;
        let w = self.warmup_steps();
        if s < w {
            return Ok(self.base_lr * s / w);
        }
        let span = self.total_steps as f64 - w;
        if span <= 0.0 {
            return Ok(self.base_lr);
        }
        let progress = (s - w) / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Moment estimates for every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(store: &ParamStore<f32>, cfg: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamWState {
            cfg,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One decoupled-weight-decay update:
    /// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`. Only parameters present in
    /// `grads` move.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for {}", store.name(*id))));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let theta = store.get_mut(*id);
            for (k, (t, &gk)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk as f64;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                let th = *t as f64;
                *t = (th - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * th)) as f32;
            }
        }
        Ok(())
    }
}

/// Gradients of the grad-enabled parameters after `backward`.
pub fn collect_grads(g: &Graph<f32>, binding: &Binding, store: &ParamStore<f32>) -> Vec<(ParamId, Tensor<f32>)> {
    store
        .ids()
        .filter_map(|id| g.grad(binding[id]).map(|t| (id, t.clone())))
        .collect()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, t)| t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            base_lr: 5e-5,
            total_steps: 4300,
            warmup_fraction: 0.01,
        }
    }

    #[test]
    fn schedule_key_points() {
        let s = sched();
        let w = 43.0;
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(43).unwrap() - 5e-5).abs() < 1e-12);
        assert!(s.lr_at(4300).unwrap().abs() < 1e-12);
        // midpoint of the cosine phase falls on a half step; check the
        // closed form at an integer step instead
        let step = 2000usize;
        let expect = 5e-5 * 0.5 * (1.0 + (std::f64::consts::PI * (step as f64 - w) / (4300.0 - w)).cos());
        assert!((s.lr_at(step).unwrap() - expect).abs() < 1e-15);
        assert!(matches!(s.lr_at(4301), Err(Error::Usage(_))));
    }

    #[test]
    fn schedule_midpoint_is_half_base() {
        let s = Schedule {
            base_lr: 1e-3,
            total_steps: 600,
            warmup_fraction: 0.01,
        };
        // w = 6, midpoint 6 + 594/2 = 303
        assert!((s.lr_at(303).unwrap() - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        let s = Schedule {
            base_lr: 1e-3,
            total_steps: 1000,
            warmup_fraction: 0.01,
        };
        let left = s.base_lr * (10.0 - 1e-9) / 10.0;
        assert!((left - s.lr_at(10).unwrap()).abs() < 1e-12);
    }

    fn scalar_store(v: f32) -> (ParamStore<f32>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::from_vec(vec![v])).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = scalar_store(0.7);
        let mut st = AdamWState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        st.update(&mut store, &[(id, Tensor::from_vec(vec![0.0]))], 0.1).unwrap();
        assert_eq!(store.get(id).data(), &[0.7]);
    }

    #[test]
    fn decay_alone_shrinks_by_one_minus_lr_wd() {
        let (mut store, id) = scalar_store(2.0);
        let mut st = AdamWState::new(&store, AdamWConfig::default());
        st.update(&mut store, &[(id, Tensor::from_vec(vec![0.0]))], 0.01).unwrap();
        let expect = 2.0f64 * (1.0 - 0.01 * 0.1);
        assert!((store.get(id).data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        let (mut store, id) = scalar_store(0.5);
        let cfg = AdamWConfig::default();
        let mut st = AdamWState::new(&store, cfg);
        let (g, lr, th) = (0.25f64, 0.01f64, 0.5f32 as f64);
        st.update(&mut store, &[(id, Tensor::from_vec(vec![g as f32]))], lr).unwrap();
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expect = th - lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * th);
        // parameters are stored in f32
        assert!((store.get(id).data()[0] as f64 - expect).abs() <= f32::EPSILON as f64);
        assert!(((expect as f32) - store.get(id).data()[0]).abs() == 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = scalar_store(0.5);
        let mut st = AdamWState::new(&store, AdamWConfig::default());
        let err = st
            .update(&mut store, &[(id, Tensor::from_vec(vec![f32::NAN]))], 0.1)
            .unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("theta")));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let (store, id) = scalar_store(0.0);
        let _ = store;
        let mut grads = vec![(id, Tensor::from_vec(vec![3.0f32, 4.0]))];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads[0].1.norm() - 1.0).abs() < 1e-6);
        let mut grads = vec![(id, Tensor::from_vec(vec![0.3f32]))];
        clip_global_norm(&mut grads, 1.0);
        assert_eq!(grads[0].1.data(), &[0.3]);
    }
}

//! Adam with bias correction and per-group learning-rate scaling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    group_scale: BTreeMap<ParamGroup, f64>,
}

impl AdamState {
    /// Zeroed moments for every parameter in `store`; β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |s: &ParamStore| s.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
            group_scale: BTreeMap::new(),
        }
    }

    /// Multiplies the learning rate of one parameter group.
    pub fn with_group_scale(mut self, group: ParamGroup, scale: f64) -> Self {
        self.group_scale.insert(group, scale);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently held by `store`. Gradients are
    /// left untouched; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.params().len() != self.m.len() {
            return Err(Error::Usage("optimizer state does not match parameter store".into()));
        }
        if let Some(p) = store.params().iter().find(|p| p.tensor.requires_grad() && p.tensor.grad().is_none()) {
            return Err(Error::Usage(format!("parameter {} has no gradient", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = self.lr * self.group_scale.get(&store.param(id).group).copied().unwrap_or(1.0);
            let tensor = store.tensor_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn single(value: f64) -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", ParamGroup::PointHead, &[1], Init::Zeros, 0);
        s.tensor_mut(id).data_mut()[0] = value;
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = single(0.0);
        s.tensor_mut(id).accumulate_grad(&[1.0]);
        let mut adam = AdamState::new(&s, 0.1);
        adam.step(&mut s).unwrap();
        let delta = s.tensor(id).data()[0];
        assert!((delta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = single(0.37);
        s.zero_grads();
        let mut adam = AdamState::new(&s, 0.1);
        for _ in 0..5 {
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.tensor(id).data()[0], 0.37);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let (mut s, _) = single(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        assert!(matches!(adam.step(&mut s), Err(Error::Usage(_))));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn three_steps_on_square_match_hand_recurrence() {
        // f(w) = w², g = 2w. Reference values iterated by hand from w0 = 1, lr = 0.1:
        // step 1: m = 0.2, v = 0.004, mhat = 2, vhat = 4 → w = 1 - 0.1·2/(2+1e-8)
        let (mut s, id) = single(1.0);
        let mut adam = AdamState::new(&s, 0.1);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            reference.push(w);
        }
        // First-step value written out: 1 - 0.1·(2/(2 + 1e-8)).
        assert!((reference[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        for want in reference {
            s.clear_grads();
            let w_now = s.tensor(id).data()[0];
            s.tensor_mut(id).accumulate_grad(&[2.0 * w_now]);
            adam.step(&mut s).unwrap();
            assert!((s.tensor(id).data()[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn group_scale_applies() {
        let mut s = ParamStore::new();
        let a = s.register("a", ParamGroup::Backbone, &[1], Init::Zeros, 0);
        let b = s.register("b", ParamGroup::PointHead, &[1], Init::Zeros, 0);
        s.zero_grads();
        s.tensor_mut(a).accumulate_grad(&[1.0]);
        s.tensor_mut(b).accumulate_grad(&[1.0]);
        let mut adam = AdamState::new(&s, 1e-4).with_group_scale(ParamGroup::Backbone, 0.1);
        adam.step(&mut s).unwrap();
        let ratio = s.tensor(a).data()[0] / s.tensor(b).data()[0];
        assert!((ratio - 0.1).abs() < 1e-9);
    }
}

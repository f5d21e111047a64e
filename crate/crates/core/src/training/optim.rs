use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Gradients;
use crate::transformer::ParameterStore;

/// Adam moments with decoupled weight decay. The decay coefficient at each
/// step is `weight_decay_ratio * lr`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_ratio: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay_ratio: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_ratio,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every tensor in `grads`. A gradient for a frozen
    /// tensor is a contract violation and nothing is modified.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if store.is_frozen(name)? {
                return Err(Error::FrozenGradient(name.clone()));
            }
            let t = store.tensor(name)?;
            if t.shape() != g.shape() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = (self.weight_decay_ratio * lr) as f32;
        for (name, g) in grads.iter() {
            let w = store.tensor_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((p, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = (b1 as f32) * *mi + (1.0 - b1 as f32) * gi;
                *vi = (b2 as f32) * *vi + (1.0 - b2 as f32) * gi * gi;
                let mhat = *mi as f64 / c1;
                let vhat = *vi as f64 / c2;
                *p -= decay * *p;
                *p -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(), false);
        s.insert("frozen", Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        s
    }

    fn grads(entries: &[(&str, Vec<f32>)]) -> Gradients {
        let mut g = Gradients::default();
        for (n, v) in entries {
            g.insert(n.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap());
        }
        g
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            opt.step(&mut s, &grads(&[("w", vec![0.0, 0.0])]), 1e-2).unwrap();
        }
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(1.0), false);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &grads(&[("x", vec![1.0])]), 1e-3).unwrap();
        // m_hat = 1, v_hat = 1, update = lr / (1 + eps)
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.tensor("x").unwrap().item() as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn decay_is_proportional_to_lr() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(2.0), false);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, &grads(&[("x", vec![0.0])]), 0.5).unwrap();
        assert!((s.tensor("x").unwrap().item() - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn frozen_gradient_is_rejected_and_store_untouched() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(0.1);
        let g = grads(&[("w", vec![1.0, 1.0]), ("frozen", vec![1.0])]);
        assert!(matches!(opt.step(&mut s, &g, 1e-3), Err(Error::FrozenGradient(_))));
        assert!(s.bit_eq(&before));
        assert_eq!(opt.steps_taken(), 0);
        for _ in 0..100 {
            opt.step(&mut s, &grads(&[("w", vec![0.3, -0.2])]), 1e-3).unwrap();
        }
        assert!(s.get("frozen").unwrap().tensor.bit_eq(&before.get("frozen").unwrap().tensor));
    }
}

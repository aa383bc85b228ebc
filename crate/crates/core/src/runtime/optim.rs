//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamStore;

pub type Gradients = BTreeMap<String, Tensor>;

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn zeros(params: &ParamStore) -> Self {
        let z: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::zeros(params),
        }
    }

    /// Applies one bias-corrected update. Parameters without a gradient
    /// entry are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get(&name).unwrap();
            let m = self.state.m.get_mut(&name).ok_or_else(|| missing(&name))?;
            let v = self.state.v.get_mut(&name).ok_or_else(|| missing(&name))?;
            let g = grads.get(&name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape("adam", g.shape(), p.shape()));
                }
            }
            let mut next = (**p).clone();
            for i in 0..next.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                next.data_mut()[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
            params.replace(&name, next)?;
        }
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Model(format!("optimizer has no state for parameter {name:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![1.0, -2.0]));
        p.insert("b", Tensor::vector(vec![0.5]));
        p
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::vector(vec![3.0, 0.0]));
        g.insert("b".into(), Tensor::vector(vec![4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store();
        let mut adam = Adam::new(&p, 0.1);
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::vector(vec![0.3, -5.0]));
        adam.step(&mut p, &g).unwrap();
        let a = p.get("a").unwrap();
        assert!((a.data()[0] - 0.9).abs() < 1e-6);
        assert!((a.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.get("b").unwrap().data(), &[0.5]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0);
        let mut g = Gradients::new();
        g.insert("a".into(), Tensor::vector(vec![1.0, 1.0]));
        g.insert("b".into(), Tensor::vector(vec![1.0]));
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.state.step, 1);
    }
}

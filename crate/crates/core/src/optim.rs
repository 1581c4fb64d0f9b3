//! Adam with bias correction and optional global-norm clipping.

use std::collections::BTreeMap;

use pathmoe_autodiff::{ParamStore, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                CoreError::Invalid(format!("gradient for unknown parameter {name}"))
            })?;
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (k, (&gk, pk)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *pk -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, -1.0])).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![0.5, -2.0]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0])).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::vector(vec![3.0]));
        Adam::new(0.0).step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}

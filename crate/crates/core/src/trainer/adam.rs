//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam settings {self:?}")))
        }
    }
}

/// First and second moment buffers for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    config: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<S>> = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        Ok(Adam { config, m: zeros.clone(), v: zeros, steps: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` belongs to the i-th parameter; `None` counts
    /// as a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let lr_t = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let eps_hat = c.eps * (1.0 - c.beta2.powi(t)).sqrt();
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one, lr_t, eps_hat) = (S::one(), S::lit(lr_t), S::lit(eps_hat));
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.tensor.data_mut();
            match &grads[i] {
                Some(g) => {
                    if g.numel() != w.len() {
                        return Err(Error::shape("adam_step", format!("{}: gradient {:?}", p.name, g.shape())));
                    }
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *w -= lr_t * *m / (v.sqrt() + eps_hat);
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        *w -= lr_t * *m / (v.sqrt() + eps_hat);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamRole;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", ParamRole::Weight, Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p).unwrap();
        let g = Tensor::from_f64([3], &[4.0, -0.01, 0.0]).unwrap();
        opt.step(&mut p, &[Some(g)]).unwrap();
        let w = p.iter().next().unwrap().tensor.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", ParamRole::Weight, Tensor::from_f64([2], &[3.0, -4.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p).unwrap();
        for _ in 0..2000 {
            let g = p.iter().next().unwrap().tensor.map(|x| 2.0 * x);
            opt.step(&mut p, &[Some(g)]).unwrap();
        }
        assert!(p.iter().next().unwrap().tensor.data().iter().all(|x| x.abs() < 1e-3));
    }
}

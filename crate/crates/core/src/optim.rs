//! Adam over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            let mut z = ParamStore::new();
            for (k, v) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(v.shape().to_vec()));
            }
            z
        };
        Self { cfg, m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        self.step_with_lr(params, grads, self.cfg.lr)
    }

    /// Same as [`Adam::step`] with the learning rate overridden for this step.
    pub fn step_with_lr(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::MissingMember(format!("gradient for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::MissingMember(format!("adam.m.{name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::MissingMember(format!("adam.v.{name}")))?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv.as_f64();
                let m1 = beta1 * mv.as_f64() + (1.0 - beta1) * gv;
                let v1 = beta2 * vv.as_f64() + (1.0 - beta2) * gv * gv;
                *mv = T::lit(m1);
                *vv = T::lit(v1);
                let upd = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + eps);
                *pv = T::lit(pv.as_f64() - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::from_vec([2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &p);
        for _ in 0..2000 {
            let mut g = ParamStore::new();
            g.insert("x", p.get("x").unwrap().scale(2.0));
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::from_vec([1], vec![1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        let mut g = ParamStore::new();
        g.insert("x", Tensor::from_vec([1], vec![5.0]).unwrap());
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }
}

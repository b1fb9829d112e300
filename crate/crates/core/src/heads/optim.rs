use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

fn check_grad<T: Scalar>(store: &ParamStore<T>, path: &str, g: &Tensor<T>) -> Result<()> {
    let p = store.get(path)?;
    if p.shape() != g.shape() {
        return Err(shape_err(
            "optimizer",
            format!("gradient {:?} for `{path}` does not match parameter {:?}", g.shape(), p.shape()),
        ));
    }
    Ok(())
}

fn slot<'a>(map: &'a mut BTreeMap<String, Vec<f64>>, path: &str, len: usize) -> &'a mut Vec<f64> {
    map.entry(path.to_string()).or_insert_with(|| vec![0.0; len])
}

#[derive(Debug, Clone)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    sq_grad: BTreeMap<String, Vec<f64>>,
    sq_update: BTreeMap<String, Vec<f64>>,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self::new(0.95, 1e-6).unwrap()
    }
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || !(eps > 0.0) {
            return Err(invalid(format!("adadelta needs 0 < rho < 1 and eps > 0, got rho={rho} eps={eps}")));
        }
        Ok(Adadelta {
            rho,
            eps,
            sq_grad: BTreeMap::new(),
            sq_update: BTreeMap::new(),
        })
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (path, g) in grads {
            check_grad(store, path, g)?;
            let eg = slot(&mut self.sq_grad, path, g.len());
            let ed = slot(&mut self.sq_update, path, g.len());
            let theta = store.get_mut(path)?.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                eg[i] = self.rho * eg[i] + (1.0 - self.rho) * gi * gi;
                let delta = -((ed[i] + self.eps).sqrt() / (eg[i] + self.eps).sqrt()) * gi;
                ed[i] = self.rho * ed[i] + (1.0 - self.rho) * delta * delta;
                theta[i] = T::from_f64(theta[i].as_f64() + delta);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3, 0.9, 0.999, 1e-8).unwrap()
    }
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(lr > 0.0) || !unit(beta1) || !unit(beta2) || !(eps > 0.0) {
            return Err(invalid("adam needs lr > 0, betas in [0, 1) and eps > 0"));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (path, g) in grads {
            check_grad(store, path, g)?;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, g) in grads {
            let m = slot(&mut self.m, path, g.len());
            let v = slot(&mut self.v, path, g.len());
            let theta = store.get_mut(path)?.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                theta[i] = T::from_f64(theta[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adadelta,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(OptimizerKind::Adadelta),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adadelta(Adadelta),
    Adam(Adam),
}

impl Optimizer {
    /// Default hyperparameters; `lr` overrides Adam's learning rate.
    pub fn new(kind: OptimizerKind, lr: Option<f64>) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Adadelta => Optimizer::Adadelta(Adadelta::default()),
            OptimizerKind::Adam => {
                let mut adam = Adam::default();
                if let Some(lr) = lr {
                    adam = Adam::new(lr, adam.beta1, adam.beta2, adam.eps)?;
                }
                Optimizer::Adam(adam)
            }
        })
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        match self {
            Optimizer::Adadelta(o) => o.step(store, grads),
            Optimizer::Adam(o) => o.step(store, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn one(value: f64) -> (ParamStore<f64>, BTreeMap<String, Tensor<f64>>) {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_f64(&[1], &[value]).unwrap(), ParamKind::Weight).unwrap();
        (store, BTreeMap::new())
    }

    #[test]
    fn adadelta_first_step() {
        let (mut store, mut grads) = one(0.0);
        grads.insert("w".to_string(), Tensor::from_f64(&[1], &[1.0]).unwrap());
        Adadelta::default().step(&mut store, &grads).unwrap();
        let expected = -(1e-6f64.sqrt() / (0.05f64 + 1e-6).sqrt());
        let got = store.get("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-15);
        assert!((got + 4.4718e-3).abs() / 4.4718e-3 < 1e-3);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        // g1 = 0.5: m = 0.05, v = 0.00025, m^ = 0.5, v^ = 0.25 -> step lr * 0.5 / (0.5 + eps).
        // g2 = -1.0: m = -0.055, v = 0.00124975, m^ = -0.055 / 0.19, v^ = 0.00124975 / 0.001999.
        let (mut store, mut grads) = one(1.0);
        let mut adam = Adam::default();
        grads.insert("w".to_string(), Tensor::from_f64(&[1], &[0.5]).unwrap());
        adam.step(&mut store, &grads).unwrap();
        let after1 = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - after1).abs() < 1e-15);
        grads.insert("w".to_string(), Tensor::from_f64(&[1], &[-1.0]).unwrap());
        adam.step(&mut store, &grads).unwrap();
        let m_hat = -0.055 / 0.19;
        let v_hat = 0.00124975 / (1.0 - 0.999f64.powi(2));
        let after2 = after1 - 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((store.get("w").unwrap().data()[0] - after2).abs() < 1e-14);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let (mut store, mut grads) = one(0.0);
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        assert!(Adadelta::default().step(&mut store, &grads).is_err());
        grads.clear();
        grads.insert("missing".to_string(), Tensor::zeros(&[1]));
        assert!(Adam::default().step(&mut store, &grads).is_err());
    }
}

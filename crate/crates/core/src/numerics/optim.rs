use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::scalar::Scalar;

/// First-order update rule applied to a [`ParamSet`] with populated grads.
pub trait Optimizer<T: Scalar> {
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()>;
    fn lr(&self) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub fn build_optimizer<T: Scalar>(
    kind: OptimizerKind,
    lr: f64,
) -> Result<Box<dyn Optimizer<T> + Send>> {
    Ok(match kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(lr)?),
        OptimizerKind::Adam => Box::new(Adam::new(lr)?),
    })
}

fn check_lr(lr: f64) -> Result<()> {
    // lr = 0 is accepted so a frozen run can reuse the same loop.
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    Ok(())
}

/// `p <- p - lr * grad(p)`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Self { lr })
    }
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        params.add_scaled_grads(T::lit(-self.lr))?;
        params.bump_step();
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

/// Adaptive-moment update with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGrad(name.clone()));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - b1.powi(self.t);
        let c2 = one - b2.powi(self.t);
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (name, t) in params.iter_mut() {
            let g = t.grad().expect("checked above").to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.bump_step();
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

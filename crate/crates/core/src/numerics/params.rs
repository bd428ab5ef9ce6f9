use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, TensorRecord};
use crate::scalar::Scalar;

/// Named trainable tensors. Iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    step: u64,
}

/// Frozen copy of a [`ParamSet`], restorable bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot<T>(ParamSet<T>);

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        let mut copy = self.clone();
        copy.clear_grads();
        ParamSnapshot(copy)
    }

    pub fn restore(&mut self, snap: &ParamSnapshot<T>) {
        *self = snap.0.clone();
    }

    /// `p <- p + coeff * grad(p)` for every parameter. Does not count as an
    /// optimizer step.
    pub fn add_scaled_grads(&mut self, coeff: T) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            let g = t
                .grad()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .to_vec();
            t.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(p, g)| *p = *p + coeff * g);
        }
        Ok(())
    }

    /// Squared L2 norm of all gradients.
    pub fn grad_sq_norm(&self) -> Result<T> {
        let mut s = T::zero();
        for (name, t) in &self.tensors {
            let g = t.grad().ok_or_else(|| Error::MissingGrad(name.clone()))?;
            s = s + g.iter().map(|&x| x * x).sum();
        }
        Ok(s)
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|(n, t)| TensorRecord::from_tensor(n, t))
            .collect()
    }

    pub fn from_records(records: &[TensorRecord]) -> Result<Self> {
        let mut p = Self::new();
        for r in records {
            p.register(&r.name, r.to_tensor()?)?;
        }
        Ok(p)
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "param layout",
                    lhs: t.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = other
            .tensors
            .keys()
            .find(|k| !self.tensors.contains_key(*k))
        {
            return Err(Error::UnknownParam(extra.clone()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f64>::new();
        p.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.register("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn snapshot_restore_is_exact() {
        let mut p = ParamSet::<f64>::new();
        p.register("w", Tensor::from_vec(vec![0.1, 0.2])).unwrap();
        let snap = p.snapshot();
        p.get_mut("w").unwrap().data_mut()[0] = 9.0;
        p.restore(&snap);
        assert_eq!(p.get("w").unwrap().data(), &[0.1, 0.2]);
    }

    #[test]
    fn scaled_grad_update_needs_grads() {
        let mut p = ParamSet::<f64>::new();
        p.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            p.add_scaled_grads(0.1),
            Err(Error::MissingGrad(_))
        ));
        p.get_mut("w").unwrap().set_grad(vec![2.0]).unwrap();
        p.add_scaled_grads(-0.25).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
    }
}

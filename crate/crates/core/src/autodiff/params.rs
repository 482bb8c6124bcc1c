use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// What a learnable array is used for; batch-norm affine parameters get
/// their own warmup group during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    pub kind: ParamKind,
}

/// Named learnable arrays of one or more networks plus non-learnable
/// buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

impl ParamStore {
    pub fn new(init_seed: u64) -> Self {
        Self {
            init_seed,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
        }
        self.params.insert(
            name,
            Param {
                value,
                grad: None,
                kind,
            },
        );
        Ok(())
    }

    /// Adds `{prefix}.w` (`fan_in × fan_out`, Glorot-uniform) and `{prefix}.b` (zeros).
    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::invalid(format!("linear init: {e}")))?;
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(format!("{prefix}.w"), Tensor::new(fan_in, fan_out, w)?, ParamKind::Weight)?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out), ParamKind::Weight)
    }

    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let v: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        self.insert(name, Tensor::new(rows, cols, v)?, ParamKind::Weight)
    }

    /// Adds `{prefix}.gamma`, `{prefix}.beta` and running-stat buffers.
    pub fn add_batch_norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(1, width, 1.0), ParamKind::BatchNorm)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(1, width), ParamKind::BatchNorm)?;
        self.buffers
            .insert(format!("{prefix}.running_mean"), Tensor::zeros(1, width));
        self.buffers
            .insert(format!("{prefix}.running_var"), Tensor::filled(1, width, 1.0));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_buffer",
                lhs: slot.shape(),
                rhs: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grads` into the gradient slots (additive across calls).
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "accumulate_grads",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
        Ok(())
    }

    /// Copies every parameter and buffer of `other` whose name starts with
    /// `prefix` into `self`. Shapes must match.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter '{name}' has shape {:?} in checkpoint but {:?} in model",
                    p.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
            copied += 1;
        }
        for (name, b) in other.buffers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.set_buffer(name, b.clone())?;
        }
        Ok(copied)
    }

    /// Parameters and buffers whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, b)| (n.clone(), b.clone()))
                .collect(),
            init_seed: self.init_seed,
        }
    }

    /// Moves all entries of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::invalid(format!("duplicate parameter name '{name}'")));
            }
            self.params.insert(name, p);
        }
        self.buffers.extend(other.buffers);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(1);
        store.add_linear("l", 10, 6, &mut rng).unwrap();
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(store.value("l.w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert!(store.value("l.b").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(0);
        store.insert("a", Tensor::scalar(1.0), ParamKind::Weight).unwrap();
        assert!(store.insert("a", Tensor::scalar(2.0), ParamKind::Weight).is_err());
    }

    #[test]
    fn grads_accumulate_additively() {
        let mut store = ParamStore::new(0);
        store.insert("a", Tensor::scalar(1.0), ParamKind::Weight).unwrap();
        let g: BTreeMap<_, _> = [("a".to_string(), Tensor::scalar(2.0))].into();
        store.accumulate_grads(&g).unwrap();
        store.accumulate_grads(&g).unwrap();
        assert_eq!(store.get("a").unwrap().grad.as_ref().unwrap().item().unwrap(), 4.0);
        store.zero_grad();
        assert!(store.get("a").unwrap().grad.is_none());
    }
}

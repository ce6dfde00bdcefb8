use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor with an optional gradient of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        id
    }

    /// Zero-mean uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let id = other
                .id_of(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let src = &other.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Parameter-wise arithmetic mean of `stores`, which must share names
    /// and shapes with `self`.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = *stores
            .first()
            .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
        let mut out = first.clone();
        out.zero_grad();
        let n = stores.len() as f64;
        for p in &mut out.params {
            let mut sum = p.value.data().to_vec();
            for other in &stores[1..] {
                let id = other
                    .id_of(&p.name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
                let src = &other.get(id).value;
                if src.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
                }
                sum.iter_mut().zip(src.data()).for_each(|(a, b)| *a += b);
            }
            for (dst, s) in p.value.data_mut().iter_mut().zip(&sum) {
                *dst = s / n;
            }
        }
        Ok(out)
    }
}

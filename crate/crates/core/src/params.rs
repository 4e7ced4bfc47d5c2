//! Named-tensor parameter sets.
//!
//! A [`ParameterSet`] maps tensor names (e.g. `encoder.block0.conv.weight`)
//! to dynamically-shaped arrays. Models read their weights out of one by
//! name, optimizers update it in place, the server aggregates client deltas
//! over it, and checkpoints serialize it. Iteration order is insertion order,
//! which registration keeps identical across processes, so reductions over a
//! set are deterministic.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::Scalar;

/// An ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<F> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F> Default for ParameterSet<F> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<F: Scalar> ParameterSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new tensor. Registering the same name twice is a coding
    /// error, not a state update, so it is rejected.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Overwrite an existing tensor with one of the same shape.
    pub fn set(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("set `{name}`"),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Elementwise-add into an existing tensor, or insert it if absent.
    /// This is the primitive gradient buffers are built on: every backward
    /// pass accumulates rather than assigns, so shared parameters (siamese
    /// branches) sum their contributions naturally.
    pub fn accumulate(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        context: format!("accumulate `{name}`"),
                        expected: slot.shape().to_vec(),
                        got: value.shape().to_vec(),
                    });
                }
                *slot += &value;
            }
            None => {
                self.entries.insert(name.to_string(), value);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(ArrayD::len).sum()
    }

    /// A set with the same schema and all values zero.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self { entries }
    }

    /// Re-instantiate every value in another scalar precision.
    pub fn cast_to<G: Scalar>(&self) -> ParameterSet<G> {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let w = v.mapv(|x| {
                    G::from_f64(x.to_f64().expect("scalar convertible via f64"))
                        .expect("scalar convertible via f64")
                });
                (k.clone(), w)
            })
            .collect();
        ParameterSet { entries }
    }

    /// True when both sets hold the same names with the same shapes.
    /// Order is irrelevant: schemas are compared as maps.
    pub fn same_schema(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, v)| {
                other
                    .entries
                    .get(k)
                    .is_some_and(|w| w.shape() == v.shape())
            })
    }

    /// Like [`Self::same_schema`] but reports *what* differs.
    pub fn ensure_same_schema(&self, other: &Self) -> Result<()> {
        for (k, v) in &self.entries {
            match other.entries.get(k) {
                None => {
                    return Err(Error::SchemaMismatch(format!(
                        "`{k}` present in one set, missing from the other"
                    )))
                }
                Some(w) if w.shape() != v.shape() => {
                    return Err(Error::SchemaMismatch(format!(
                        "`{k}` has shape {:?} in one set, {:?} in the other",
                        v.shape(),
                        w.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::SchemaMismatch(format!(
                "`{extra}` present in one set, missing from the other"
            )));
        }
        Ok(())
    }

    /// `self += a * other`, tensor by tensor.
    pub fn axpy(&mut self, a: F, other: &Self) -> Result<()> {
        self.ensure_same_schema(other)?;
        for (k, v) in self.entries.iter_mut() {
            v.zip_mut_with(&other.entries[k], |x, &y| *x += a * y);
        }
        Ok(())
    }

    /// `self - other` as a new set.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_schema(other)?;
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v - &other.entries[k]))
            .collect();
        Ok(Self { entries })
    }

    /// Multiply every value by a constant.
    pub fn scale(&mut self, a: F) {
        for v in self.entries.values_mut() {
            v.mapv_inplace(|x| x * a);
        }
    }

    /// Sum of squares over every value in the set.
    pub fn sq_norm(&self) -> F {
        self.entries
            .values()
            .map(|v| v.iter().map(|&x| x * x).sum::<F>())
            .sum()
    }

    /// Largest absolute entry difference between two sets with equal schema.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.ensure_same_schema(other)?;
        let mut worst = F::zero();
        for (k, v) in &self.entries {
            for (&x, &y) in v.iter().zip(other.entries[k].iter()) {
                let d = (x - y).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        Ok(worst)
    }

    /// True when every value in every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl<F: Scalar> FromIterator<(String, ArrayD<F>)> for ParameterSet<F> {
    fn from_iter<T: IntoIterator<Item = (String, ArrayD<F>)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

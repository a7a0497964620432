use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// Ordered collection of named tensors.
///
/// Holds network weights as well as same-shaped offsets (fine-tuning deltas,
/// gradients, optimizer moments). Names are unique and shapes are fixed once
/// inserted; mutable access is only ever through flat slices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        // force standard layout so flat slices are always available
        let tensor = if tensor.is_standard_layout() {
            tensor
        } else {
            tensor.as_standard_layout().into_owned()
        };
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn zeros(name_shapes: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut set = Self::new();
        for (name, shape) in name_shapes {
            set.insert(name.clone(), ArrayD::zeros(IxDyn(shape)))?;
        }
        Ok(set)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.entries
            .get_mut(name)
            .map(|t| t.as_slice_mut().expect("standard layout"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(ArrayD::len).sum()
    }

    /// Ok iff `other` has identical names (in order) and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets hold {} vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Entrywise `base + sum_i coeff_i * delta_i`.
    pub fn axpy(&self, terms: &[(f64, &ParamSet)]) -> Result<ParamSet> {
        for (_, delta) in terms {
            self.check_compatible(delta)?;
        }
        let mut out = self.clone();
        for (coeff, delta) in terms {
            for ((_, dst), (_, src)) in out.entries.iter_mut().zip(&delta.entries) {
                dst.zip_mut_with(src, |d, s| *d += coeff * s);
            }
        }
        Ok(out)
    }

    /// `self - other`, the offset that takes `other` to `self`.
    pub fn delta_from(&self, other: &ParamSet) -> Result<ParamSet> {
        other.check_compatible(self)?;
        let mut out = self.clone();
        for ((_, dst), (_, src)) in out.entries.iter_mut().zip(&other.entries) {
            dst.zip_mut_with(src, |d, s| *d -= s);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Free-function form of [`ParamSet::axpy`].
pub fn paramset_axpy(base: &ParamSet, terms: &[(f64, &ParamSet)]) -> Result<ParamSet> {
    base.axpy(terms)
}

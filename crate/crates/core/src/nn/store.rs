//! Flat named-parameter storage shared by every trainable component.
//!
//! Both branches hold `ParamId` handles into one store, which is what makes
//! the shared-encoder contract literal: there is exactly one array per
//! parameter and everyone addresses it by id.

use std::collections::BTreeMap;

use crate::scalar::Scalar;

/// Handle to one named parameter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Register a parameter; names must be unique across the store.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value mismatch for `{name}`"
        );
        let id = ParamId(self.names.len());
        self.grads.push(vec![T::zero(); values.len()]);
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    /// Mutable values plus their gradient in one borrow (optimizer update).
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &[T]) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Total scalar count across the given ids (all params when `None`).
    pub fn param_count(&self, ids: Option<&[ParamId]>) -> usize {
        match ids {
            Some(ids) => ids.iter().map(|id| self.values[id.0].len()).sum(),
            None => self.values.iter().map(Vec::len).sum(),
        }
    }

    /// Flat name -> (shape, values-as-f64) archive, sorted by name.
    pub fn export(&self, ids: &[ParamId]) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        ids.iter()
            .map(|&id| {
                (
                    self.names[id.0].clone(),
                    (
                        self.shapes[id.0].clone(),
                        self.values[id.0].iter().map(|v| v.to_f64_lossy()).collect(),
                    ),
                )
            })
            .collect()
    }

    /// Overwrite parameter values from an archive; shapes must match.
    pub fn import(&mut self, archive: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> crate::error::Result<()> {
        for (name, (shape, values)) in archive {
            let id = self.id_of(name).ok_or_else(|| {
                crate::error::Error::Checkpoint(format!("unknown parameter `{name}`"))
            })?;
            if self.shapes[id.0] != *shape {
                return Err(crate::error::Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    self.shapes[id.0], shape
                )));
            }
            for (dst, src) in self.values[id.0].iter_mut().zip(values) {
                *dst = T::from_f64_lossy(*src);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

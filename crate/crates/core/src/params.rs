//! Named parameter storage and its binding to a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::{Scalar, Tensor};

/// Dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters by name, iterated in lexicographic order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightTree<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> WeightTree<T> {
    pub fn new() -> Self {
        WeightTree { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(invalid("weights", format!("duplicate parameter `{name}`")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces an existing tensor of the same shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != t.shape() {
            return Err(shape_err("weights", format!("`{name}` is {:?}, got {:?}", slot.shape(), t.shape())));
        }
        *slot = t;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalars.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Same names, shapes and bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn cast<U: Scalar>(&self) -> WeightTree<U> {
        WeightTree {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every tensor as a tape variable: leaves when `trainable`, constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| {
                    let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for WeightTree<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        WeightTree {
            map: iter.into_iter().collect(),
        }
    }
}

/// A weight tree bound to one tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Binds existing variables by name.
    pub fn from_vars<I: IntoIterator<Item = (String, Var<'t, T>)>>(vars: I) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn root(&self) -> Scope<'_, 't, T> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}

/// View of a [`Bound`] under a name prefix.
#[derive(Clone)]
pub struct Scope<'b, 't, T: Scalar> {
    bound: &'b Bound<'t, T>,
    prefix: String,
}

impl<'b, 't, T: Scalar> Scope<'b, 't, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        let key = join(&self.prefix, name);
        self.bound.vars.get(&key).cloned().ok_or(Error::MissingParam(key))
    }

    pub fn sub(&self, name: &str) -> Scope<'b, 't, T> {
        Scope {
            bound: self.bound,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

use std::collections::{BTreeMap, HashMap};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named parameter collection. Names are unique; ids are dense and follow
/// insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Replaces every parameter value from `values`, which must carry
    /// exactly the same names and shapes.
    pub fn assign<U: Scalar>(&mut self, values: &BTreeMap<String, Tensor<U>>) -> Result<()> {
        for name in values.keys() {
            if !self.by_name.contains_key(name) {
                return Err(Error::ModelMismatch(format!("unexpected parameter {name:?}")));
            }
        }
        for p in &self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::ModelMismatch(format!("missing parameter {:?}", p.name)))?;
            if v.shape() != p.tensor.shape() {
                return Err(Error::ModelMismatch(format!(
                    "parameter {:?}: expected shape {:?}, found {:?}",
                    p.name,
                    p.tensor.shape(),
                    v.shape()
                )));
            }
        }
        for p in &mut self.params {
            p.tensor = values[&p.name].cast();
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) params: BTreeMap<ParamId, Tensor<T>>,
    pub(crate) leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: super::Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }
}

use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces a parameter. Insertion order is preserved.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&'t self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundParams {
            index: &self.index,
            vars,
        }
    }

    /// Records every parameter as a constant: no gradients are tracked.
    pub fn bind_frozen<'t>(&'t self, tape: &'t Tape<T>) -> BoundParams<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        BoundParams {
            index: &self.index,
            vars,
        }
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct BoundParams<'a, T> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var<'a, T>>,
}

impl<'a, T: Scalar> BoundParams<'a, T> {
    /// Panics on an unknown name: parameter sets are fixed by configuration,
    /// so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var<'a, T> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::autograd::Var;
use crate::tensor::{Float, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
///
/// Registration order is stable, so iterating ids gives the same sequence
/// for the same model definition.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Fresh graph leaves for one forward pass.
    pub fn vars(&self) -> Params<T> {
        Params {
            vars: self.values.iter().cloned().map(Var::parameter).collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph leaves of every parameter for a single forward/backward pass.
pub struct Params<T: Float> {
    vars: Vec<Var<T>>,
}

impl<T: Float> Params<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Collect the gradient of every parameter, zeros where unused.
    pub fn gradients(&self, grads: &crate::Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

impl<T: Float> std::ops::Index<ParamId> for Params<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Scoped parameter registration with seeded initialization.
pub struct Init<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Float> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Registration scope whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)));
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }
}

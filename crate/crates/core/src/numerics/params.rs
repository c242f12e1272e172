use indexmap::IndexMap;
use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar = f64> {
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
}

/// Named trainable tensors in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    params: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), Param { value, grad: None });
    }

    /// Registers a parameter drawn from `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(&mut self, rng: &mut R, name: impl Into<String>, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.random_range(-bound..=bound))).collect();
        self.insert(name, Tensor::from_vec(shape.to_vec(), data).expect("shape"));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    /// Binds a stored parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>, name: &str) -> Result<Var> {
        let p = self.params.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        Ok(graph.param(name, &p.value))
    }

    /// Adds the gradients held by `graph` into the matching stored parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<S>) {
        for (name, var) in graph.params() {
            let (Some(p), Some(g)) = (self.params.get_mut(name), graph.grad(var)) else { continue };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }
}

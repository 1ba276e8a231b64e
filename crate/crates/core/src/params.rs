use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. Encoder-side weights train at the "pretrained" rate,
/// heads and other randomly initialized modules at the "fresh" rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Pretrained,
    Fresh,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            value,
            grad,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    /// Normal(0, std) initialization.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
        rng: &mut SplitMix64,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng), group)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
        group: ParamGroup,
    ) -> ParamId {
        self.add(name, Tensor::filled(shape, value), group)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients computed on `graph` into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph<'_>) {
        for (id, grad) in graph.param_grads() {
            for (acc, g) in self.params[id.0].grad.iter_mut().zip(grad) {
                *acc += g;
            }
        }
    }

    /// Adds detached gradients (see [`Graph::into_param_grads`]).
    pub fn add_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, grad) in grads {
            for (acc, g) in self.params[id.0].grad.iter_mut().zip(grad) {
                *acc += g;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

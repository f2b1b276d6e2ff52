//! Named parameter storage and binding into a [`Graph`].

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, NodeId};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named learnable tensors. Order is creation order and is the
/// order checkpoints are written in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.round_to_f32();
        }
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference, no tape cost).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }
}

/// Graph nodes for one binding of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Uniform in ±√(1/fan_in).
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = math::sqrt(1.0 / fan_in as f64);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Centered normal with standard deviation `sigma`.
pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], sigma: f64) -> Tensor {
    let dist = Normal::new(0.0, sigma).expect("positive sigma");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = dist.sample(rng);
    }
    t
}

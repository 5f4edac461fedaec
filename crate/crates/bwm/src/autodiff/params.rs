//! Named parameter collections and initialization.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::rng::Rng;

/// Index of one tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(pub usize);

/// An ordered, named set of trainable tensors. Order is stable, so the
/// optimizer can key its moment buffers by position.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamRef {
        self.entries.push((name.into(), tensor));
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, r: ParamRef) -> &Tensor {
        &self.entries[r.0].1
    }

    pub fn tensor_mut(&mut self, r: ParamRef) -> &mut Tensor {
        &mut self.entries[r.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_by_name(&mut self, name: &str, tensor: Tensor) -> bool {
        for (n, t) in self.entries.iter_mut() {
            if n == name {
                assert_eq!(t.shape(), tensor.shape(), "checkpoint shape mismatch for {n}");
                *t = tensor;
                return true;
            }
        }
        false
    }

    /// Leaf every tensor into `g`, in order. `trainable` controls whether
    /// gradients are tracked.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundParams<'g> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| g.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Combined checksum over all tensors; order- and bit-sensitive.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t) in &self.entries {
            h ^= t.bit_checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Graph handles for one [`ParamSet::bind`] call.
pub struct BoundParams<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn var(&self, r: ParamRef) -> Var<'g> {
        self.vars[r.0]
    }

    /// Gradients in parameter order, as accumulated on the graph.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| g.grad(*v)).collect()
    }
}

/// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(rng: &mut Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.uniform(-bound, bound)).collect(), shape)
}

//! Named parameter storage shared by the networks and the optimizer.
//!
//! Parameters live outside any tape as plain tensors. Each training step
//! registers them onto a fresh tape as differentiable leaves, and the
//! accumulated leaf gradients are read back for the optimizer.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{NodeId, Tape, Tensor};

/// Index of a parameter within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.values.len());
        self.names.push(name.into());
        self.values.push(value);
        id
    }

    /// GAN-convention init: weights ~ N(0, 0.02), biases zero.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
        let dist = Normal::new(0.0, 0.02).unwrap();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> u64 {
        self.values.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Registers every parameter on the tape; `trainable` controls whether
    /// gradients are tracked.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Registered {
        let ids = self.values.iter().map(|t| tape.leaf(t, trainable)).collect();
        Registered { ids }
    }

    /// Reads back the leaf gradients after `Tape::backward`. Parameters the
    /// loss never touched get a zero gradient.
    pub fn collect_grads(&self, tape: &Tape, reg: &Registered) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| match tape.grad(reg.ids[i]) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tape mapping from ParamId to the tape leaf holding its value.
pub struct Registered {
    ids: Vec<NodeId>,
}

impl Registered {
    /// Builds a mapping directly from tape nodes, for callers that manage
    /// leaves themselves (gradient checks, oracles).
    pub fn from_nodes(ids: Vec<NodeId>) -> Self {
        Registered { ids }
    }

    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }
}

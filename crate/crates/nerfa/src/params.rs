//! Parameter containers and their registration on a graph.
//!
//! Model parameters rest as plain [`Tensor`]s. Each forward pass clones them
//! onto a fresh [`Graph`] as leaves; a [`Binder`] performs that registration
//! and records `(path, id)` pairs in a fixed order, which is the canonical
//! parameter order used by the optimizer and the checkpoint format alike.

use crate::error::Result;
use crate::graph::{Graph, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The seeded stream all parameter initialization draws from.
pub type InitRng = ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    InitRng::seed_from_u64(seed)
}

/// Tensor with entries uniform in `[-bound, bound]`, drawn row-major.
pub fn uniform_tensor(rng: &mut InitRng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("matching element count")
}

/// Registers parameter tensors on a graph, tracked or not, remembering
/// their paths in registration order.
pub struct Binder<'g> {
    graph: &'g mut Graph,
    track: bool,
    bindings: Vec<(String, ValueId)>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph, track: bool) -> Self {
        Binder {
            graph,
            track,
            bindings: Vec::new(),
        }
    }

    pub fn bind(&mut self, path: String, tensor: &Tensor) -> ValueId {
        let id = if self.track {
            self.graph.param(tensor)
        } else {
            self.graph.input(tensor.clone())
        };
        self.bindings.push((path, id));
        id
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.graph
    }

    pub fn into_bindings(self) -> Vec<(String, ValueId)> {
        self.bindings
    }
}

/// A dense layer `y = x W (+ b)` with `W` of shape `(fan_in, fan_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weights and bias uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// weight drawn first.
    pub fn init(rng: &mut InitRng, fan_in: usize, fan_out: usize, with_bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform_tensor(rng, &[fan_in, fan_out], bound);
        let bias = with_bias.then(|| uniform_tensor(rng, &[fan_out], bound));
        Linear { weight, bias }
    }

    pub fn bind(&self, binder: &mut Binder, path: &str) -> BoundLinear {
        BoundLinear {
            weight: binder.bind(format!("{path}.weight"), &self.weight),
            bias: self
                .bias
                .as_ref()
                .map(|b| binder.bind(format!("{path}.bias"), b)),
        }
    }

    pub fn for_each(&self, path: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{path}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{path}.bias"), b);
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{path}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{path}.bias"), b);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: ValueId,
    pub bias: Option<ValueId>,
}

impl BoundLinear {
    /// Applies the layer to a `(n, fan_in)` batch.
    pub fn apply(&self, g: &mut Graph, x: ValueId) -> Result<ValueId> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add(y, b),
            None => Ok(y),
        }
    }
}

//! Point embedding: fixed sinusoidal features gated by a learned network.
//!
//! Each 6-D ray point (position, unit direction) is expanded into a bank of
//! sinusoids, linearly projected to the model width, and multiplied
//! elementwise with the output of a small MLP on the raw point. The sinusoid
//! bank is a constant with respect to the parameters, so it enters the graph
//! untracked; gradients flow through the MLP and the projection.

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::params::{uniform_tensor, Binder, BoundLinear, InitRng, Linear};
use crate::tensor::Tensor;

/// Width of the sinusoid bank: the 6 raw inputs, then sin and cos per
/// frequency for the 3 position coordinates, then the same for direction.
pub fn cos_embed_dim(freq_pos: usize, freq_dir: usize) -> usize {
    6 + 6 * freq_pos + 6 * freq_dir
}

/// Expands `(n, 6)` points into `(n, cos_embed_dim)` sinusoid features.
///
/// Row layout: the raw 6 values; then for each frequency `k` in
/// `0..freq_pos` and each position coordinate in x, y, z order, the pair
/// `sin(2^k pi v), cos(2^k pi v)`; then the same pattern over the direction
/// coordinates with `freq_dir` frequencies.
pub fn cos_embed(points: &Tensor, freq_pos: usize, freq_dir: usize) -> Result<Tensor> {
    let shape = points.shape();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(Error::Shape(format!(
            "cos_embed expects (n, 6) points, got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let width = cos_embed_dim(freq_pos, freq_dir);
    let mut out = Vec::with_capacity(n * width);
    for row in points.values().chunks_exact(6) {
        out.extend_from_slice(row);
        for k in 0..freq_pos {
            let scale = (1u64 << k) as f64 * std::f64::consts::PI;
            for &v in &row[..3] {
                out.push((scale * v).sin());
                out.push((scale * v).cos());
            }
        }
        for k in 0..freq_dir {
            let scale = (1u64 << k) as f64 * std::f64::consts::PI;
            for &v in &row[3..] {
                out.push((scale * v).sin());
                out.push((scale * v).cos());
            }
        }
    }
    Tensor::new([n, width], out)
}

/// Learned half of the embedding: a depth-2 MLP on the raw points and a
/// projection of the sinusoid bank down to the model width.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// `(cos_embed_dim, d)` projection, applied before the Hadamard gate.
    pub proj: Tensor,
}

impl EmbedderParams {
    /// Draw order: mlp1, mlp2, then proj, each uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(rng: &mut InitRng, d: usize, freq_pos: usize, freq_dir: usize) -> Self {
        let d_c = cos_embed_dim(freq_pos, freq_dir);
        EmbedderParams {
            mlp1: Linear::init(rng, 6, d, true),
            mlp2: Linear::init(rng, d, d, true),
            proj: uniform_tensor(rng, &[d_c, d], 1.0 / (d_c as f64).sqrt()),
        }
    }

    pub fn bind(&self, binder: &mut Binder, path: &str) -> BoundEmbedder {
        BoundEmbedder {
            mlp1: self.mlp1.bind(binder, &format!("{path}.mlp1")),
            mlp2: self.mlp2.bind(binder, &format!("{path}.mlp2")),
            proj: binder.bind(format!("{path}.proj"), &self.proj),
        }
    }

    pub fn for_each(&self, path: &str, f: &mut impl FnMut(String, &Tensor)) {
        self.mlp1.for_each(&format!("{path}.mlp1"), f);
        self.mlp2.for_each(&format!("{path}.mlp2"), f);
        f(format!("{path}.proj"), &self.proj);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        self.mlp1.for_each_mut(&format!("{path}.mlp1"), f);
        self.mlp2.for_each_mut(&format!("{path}.mlp2"), f);
        f(format!("{path}.proj"), &mut self.proj);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEmbedder {
    pub mlp1: BoundLinear,
    pub mlp2: BoundLinear,
    pub proj: ValueId,
}

/// Embeds a `(n, 6)` point node into `(n, d)` features:
/// `mlp(points) * (cos_embed(points) . proj)` elementwise.
pub fn embed(
    g: &mut Graph,
    bound: &BoundEmbedder,
    points: ValueId,
    freq_pos: usize,
    freq_dir: usize,
) -> Result<ValueId> {
    let bank = cos_embed(g.value(points), freq_pos, freq_dir)?;
    let bank = g.input(bank);
    let projected = g.matmul(bank, bound.proj)?;
    let hidden = bound.mlp1.apply(g, points)?;
    let hidden = g.relu(hidden);
    let gate = bound.mlp2.apply(g, hidden)?;
    g.mul(gate, projected)
}

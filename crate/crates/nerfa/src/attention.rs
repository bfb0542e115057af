//! Self-attention and pre-norm transformer blocks.
//!
//! Two interchangeable attention forms live here. The literal form is
//! exactly `softmax(X X^T / sqrt(d)) X` with no weights; it exists so tests
//! can pin the equation down without learned parameters in the way. The
//! projected form is conventional multi-head attention: per-head query, key
//! and value projections of width `d / H`, head outputs concatenated and
//! passed through an output projection. Per-head scores scale by
//! `1 / sqrt(d / H)`, which coincides with the literal scaling at `H = 1`.
//!
//! A block layer is `x + self_attention(layer_norm(x))`: normalization on
//! the input, residual around the attention, no feed-forward stage.

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::params::{uniform_tensor, Binder, InitRng};
use crate::tensor::Tensor;

/// Which attention form a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Weightless scores straight from the token matrix.
    Literal,
    /// Learned multi-head projections.
    Projected,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Literal => "literal",
            AttentionMode::Projected => "projected",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "literal" => Ok(AttentionMode::Literal),
            "projected" => Ok(AttentionMode::Projected),
            other => Err(Error::Config(format!(
                "unknown attention mode '{other}' (expected literal or projected)"
            ))),
        }
    }
}

/// One head's projections, each of shape `(d, d / H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Attention weights for one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams {
    Literal,
    Projected {
        heads: Vec<HeadParams>,
        /// `(d, d)` projection applied to the concatenated head outputs.
        output: Tensor,
    },
}

impl AttentionParams {
    /// Draw order per head: query, key, value; then the output projection.
    /// All uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(rng: &mut InitRng, mode: AttentionMode, d: usize, heads: usize) -> Result<Self> {
        match mode {
            AttentionMode::Literal => Ok(AttentionParams::Literal),
            AttentionMode::Projected => {
                if heads == 0 || d % heads != 0 {
                    return Err(Error::Config(format!(
                        "width {d} is not divisible into {heads} heads"
                    )));
                }
                let dh = d / heads;
                let bound = 1.0 / (d as f64).sqrt();
                let heads = (0..heads)
                    .map(|_| HeadParams {
                        query: uniform_tensor(rng, &[d, dh], bound),
                        key: uniform_tensor(rng, &[d, dh], bound),
                        value: uniform_tensor(rng, &[d, dh], bound),
                    })
                    .collect();
                Ok(AttentionParams::Projected {
                    heads,
                    output: uniform_tensor(rng, &[d, d], bound),
                })
            }
        }
    }

    pub fn bind(&self, binder: &mut Binder, path: &str) -> BoundAttention {
        match self {
            AttentionParams::Literal => BoundAttention::Literal,
            AttentionParams::Projected { heads, output } => BoundAttention::Projected {
                heads: heads
                    .iter()
                    .enumerate()
                    .map(|(h, head)| BoundHead {
                        query: binder.bind(format!("{path}.h{h}.query"), &head.query),
                        key: binder.bind(format!("{path}.h{h}.key"), &head.key),
                        value: binder.bind(format!("{path}.h{h}.value"), &head.value),
                    })
                    .collect(),
                output: binder.bind(format!("{path}.out"), output),
            },
        }
    }

    pub fn for_each(&self, path: &str, f: &mut impl FnMut(String, &Tensor)) {
        if let AttentionParams::Projected { heads, output } = self {
            for (h, head) in heads.iter().enumerate() {
                f(format!("{path}.h{h}.query"), &head.query);
                f(format!("{path}.h{h}.key"), &head.key);
                f(format!("{path}.h{h}.value"), &head.value);
            }
            f(format!("{path}.out"), output);
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        if let AttentionParams::Projected { heads, output } = self {
            for (h, head) in heads.iter_mut().enumerate() {
                f(format!("{path}.h{h}.query"), &mut head.query);
                f(format!("{path}.h{h}.key"), &mut head.key);
                f(format!("{path}.h{h}.value"), &mut head.value);
            }
            f(format!("{path}.out"), output);
        }
    }
}

#[derive(Clone, Debug)]
pub enum BoundAttention {
    Literal,
    Projected {
        heads: Vec<BoundHead>,
        output: ValueId,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub query: ValueId,
    pub key: ValueId,
    pub value: ValueId,
}

/// Applies self-attention to a `(n, d)` token matrix.
///
/// Score and value products run through the graph's attention-attributed
/// matmul, so `Graph::attention_madds` counts exactly the work the
/// complexity analysis talks about; projections are excluded.
pub fn self_attention(g: &mut Graph, x: ValueId, params: &BoundAttention) -> Result<ValueId> {
    let shape = g.value(x).shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!(
            "self_attention expects (n, d) tokens, got {:?}",
            shape
        )));
    }
    let d = shape[1];
    match params {
        BoundAttention::Literal => {
            let xt = g.transpose(x)?;
            let scores = g.matmul_attention(x, xt)?;
            let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
            let weights = g.softmax(scaled, 1)?;
            g.matmul_attention(weights, x)
        }
        BoundAttention::Projected { heads, output } => {
            let dh = d / heads.len();
            let mut outputs = Vec::with_capacity(heads.len());
            for head in heads {
                let q = g.matmul(x, head.query)?;
                let k = g.matmul(x, head.key)?;
                let v = g.matmul(x, head.value)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul_attention(q, kt)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let weights = g.softmax(scaled, 1)?;
                outputs.push(g.matmul_attention(weights, v)?);
            }
            let concat = g.concat_cols(&outputs)?;
            g.matmul(concat, *output)
        }
    }
}

/// One pre-norm residual layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLayer {
    pub attention: AttentionParams,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

/// A stack of [`BlockLayer`]s applied in order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub layers: Vec<BlockLayer>,
}

impl BlockParams {
    /// `layers` stacked layers; gamma starts at ones, beta at zeros.
    pub fn init(
        rng: &mut InitRng,
        mode: AttentionMode,
        d: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|_| {
                Ok(BlockLayer {
                    attention: AttentionParams::init(rng, mode, d, heads)?,
                    ln_gamma: Tensor::filled([d], 1.0),
                    ln_beta: Tensor::zeros([d]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(BlockParams { layers })
    }

    pub fn bind(&self, binder: &mut Binder, path: &str) -> BoundBlock {
        BoundBlock {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| BoundBlockLayer {
                    attention: layer.attention.bind(binder, &format!("{path}.{l}.attn")),
                    ln_gamma: binder.bind(format!("{path}.{l}.ln_gamma"), &layer.ln_gamma),
                    ln_beta: binder.bind(format!("{path}.{l}.ln_beta"), &layer.ln_beta),
                })
                .collect(),
        }
    }

    pub fn for_each(&self, path: &str, f: &mut impl FnMut(String, &Tensor)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.attention.for_each(&format!("{path}.{l}.attn"), f);
            f(format!("{path}.{l}.ln_gamma"), &layer.ln_gamma);
            f(format!("{path}.{l}.ln_beta"), &layer.ln_beta);
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.attention.for_each_mut(&format!("{path}.{l}.attn"), f);
            f(format!("{path}.{l}.ln_gamma"), &mut layer.ln_gamma);
            f(format!("{path}.{l}.ln_beta"), &mut layer.ln_beta);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub layers: Vec<BoundBlockLayer>,
}

#[derive(Clone, Debug)]
pub struct BoundBlockLayer {
    pub attention: BoundAttention,
    pub ln_gamma: ValueId,
    pub ln_beta: ValueId,
}

/// Runs `x = x + self_attention(layer_norm(x))` for every layer.
pub fn transformer_block(g: &mut Graph, x: ValueId, block: &BoundBlock) -> Result<ValueId> {
    let mut x = x;
    for layer in &block.layers {
        let normed = g.layer_norm(x, layer.ln_gamma, layer.ln_beta)?;
        let attended = self_attention(g, normed, &layer.attention)?;
        x = g.add(attended, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, FD_TOLERANCE};
    use crate::params::init_rng;

    fn random_tokens(seed: u64, n: usize, d: usize) -> Tensor {
        uniform_tensor(&mut init_rng(seed), &[n, d], 1.0)
    }

    /// Straight-line oracle for literal attention, no tape involved.
    fn literal_attention_oracle(x: &Tensor) -> Vec<f64> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let v = x.values();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += v[i * d + k] * v[j * d + k];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for j in 0..n {
                let w = scores[j] / sum;
                for k in 0..d {
                    out[i * d + k] += w * v[j * d + k];
                }
            }
        }
        out
    }

    #[test]
    fn literal_attention_matches_straight_line_oracle() {
        let x = random_tokens(4, 5, 3);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self_attention(&mut g, xi, &BoundAttention::Literal).unwrap();
        let expected = literal_attention_oracle(&x);
        for (got, want) in g.value(y).values().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        let x = random_tokens(9, 1, 6);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = self_attention(&mut g, xi, &BoundAttention::Literal).unwrap();
        assert_eq!(g.value(y).values(), x.values());
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let x = random_tokens(17, 6, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Tensor::zeros([6, 4]);
        for (to, &from) in perm.iter().enumerate() {
            for k in 0..4 {
                permuted.values_mut()[to * 4 + k] = x.values()[from * 4 + k];
            }
        }
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let xi = g.input(t.clone());
            let y = self_attention(&mut g, xi, &BoundAttention::Literal).unwrap();
            g.value(y).values().to_vec()
        };
        let base = run(&x);
        let shuffled = run(&permuted);
        for (to, &from) in perm.iter().enumerate() {
            for k in 0..4 {
                let a = shuffled[to * 4 + k];
                let b = base[from * 4 + k];
                assert!((a - b).abs() < 1e-12, "row {to}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn projected_single_head_with_identity_weights_equals_literal() {
        let d = 4;
        let x = random_tokens(21, 5, d);
        let eye = Tensor::eye(d);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let literal = self_attention(&mut g, xi, &BoundAttention::Literal).unwrap();
        let params = BoundAttention::Projected {
            heads: vec![BoundHead {
                query: g.input(eye.clone()),
                key: g.input(eye.clone()),
                value: g.input(eye.clone()),
            }],
            output: g.input(eye.clone()),
        };
        let projected = self_attention(&mut g, xi, &params).unwrap();
        for (a, b) in g
            .value(literal)
            .values()
            .iter()
            .zip(g.value(projected).values())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn multi_head_output_keeps_token_shape() {
        let mut rng = init_rng(2);
        let params = AttentionParams::init(&mut rng, AttentionMode::Projected, 8, 4).unwrap();
        let x = random_tokens(3, 6, 8);
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, false);
        let bound = params.bind(&mut binder, "attn");
        drop(binder);
        let xi = g.input(x);
        let y = self_attention(&mut g, xi, &bound).unwrap();
        assert_eq!(g.value(y).shape(), &[6, 8]);
    }

    #[test]
    fn indivisible_head_count_is_rejected() {
        let mut rng = init_rng(2);
        assert!(AttentionParams::init(&mut rng, AttentionMode::Projected, 6, 4).is_err());
    }

    #[test]
    fn zero_output_projection_turns_the_block_into_identity() {
        let d = 4;
        let mut rng = init_rng(8);
        let mut params = BlockParams::init(&mut rng, AttentionMode::Projected, d, 2, 2).unwrap();
        for layer in &mut params.layers {
            if let AttentionParams::Projected { output, .. } = &mut layer.attention {
                *output = Tensor::zeros([d, d]);
            }
        }
        let x = random_tokens(31, 5, d);
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, false);
        let bound = params.bind(&mut binder, "block");
        drop(binder);
        let xi = g.input(x.clone());
        let y = transformer_block(&mut g, xi, &bound).unwrap();
        assert_eq!(g.value(y).values(), x.values());
    }

    #[test]
    fn attention_madds_count_score_and_value_products_only() {
        let (n, d, h) = (6, 8, 2);
        let x = random_tokens(40, n, d);
        // Literal: scores n*d*n plus values n*n*d.
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        self_attention(&mut g, xi, &BoundAttention::Literal).unwrap();
        assert_eq!(g.attention_madds(), (2 * n * n * d) as u64);

        // Projected: per head n*dh*n + n*n*dh, summed over heads = 2 n^2 d,
        // independent of the head count.
        let mut rng = init_rng(41);
        let params = AttentionParams::init(&mut rng, AttentionMode::Projected, d, h).unwrap();
        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, false);
        let bound = params.bind(&mut binder, "attn");
        drop(binder);
        let xi = g.input(x);
        self_attention(&mut g, xi, &bound).unwrap();
        assert_eq!(g.attention_madds(), (2 * n * n * d) as u64);
        // Projections did run, just not into the attention counter.
        assert!(g.matmul_madds() > g.attention_madds());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let d = 4;
        let mut rng = init_rng(55);
        let params = BlockParams::init(&mut rng, AttentionMode::Projected, d, 2, 1).unwrap();
        let layer = &params.layers[0];
        let AttentionParams::Projected { heads, output } = &layer.attention else {
            unreachable!()
        };
        let x = random_tokens(56, 3, d);
        let weights = uniform_tensor(&mut rng, &[3, d], 1.0);
        let inputs = [
            x.clone(),
            heads[0].query.clone(),
            heads[0].key.clone(),
            heads[0].value.clone(),
            heads[1].query.clone(),
            heads[1].key.clone(),
            heads[1].value.clone(),
            output.clone(),
            layer.ln_gamma.clone(),
            layer.ln_beta.clone(),
        ];
        let check = check_gradients("transformer_block", &inputs, |g, ids| {
            let bound = BoundBlock {
                layers: vec![BoundBlockLayer {
                    attention: BoundAttention::Projected {
                        heads: vec![
                            BoundHead {
                                query: ids[1],
                                key: ids[2],
                                value: ids[3],
                            },
                            BoundHead {
                                query: ids[4],
                                key: ids[5],
                                value: ids[6],
                            },
                        ],
                        output: ids[7],
                    },
                    ln_gamma: ids[8],
                    ln_beta: ids[9],
                }],
            };
            let y = transformer_block(g, ids[0], &bound)?;
            let w = g.input(weights.clone());
            let prod = g.mul(y, w)?;
            Ok(g.sum_all(prod))
        })
        .unwrap();
        assert!(
            check.max_error < FD_TOLERANCE,
            "block gradcheck failed: {:.3e}",
            check.max_error
        );
    }

    #[test]
    fn literal_attention_gradients_match_finite_differences() {
        let x = random_tokens(77, 4, 3);
        let weights = uniform_tensor(&mut init_rng(78), &[4, 3], 1.0);
        let check = check_gradients("literal_attention", &[x], |g, ids| {
            let y = self_attention(g, ids[0], &BoundAttention::Literal)?;
            let w = g.input(weights.clone());
            let prod = g.mul(y, w)?;
            Ok(g.sum_all(prod))
        })
        .unwrap();
        assert!(
            check.max_error < FD_TOLERANCE,
            "literal attention gradcheck failed: {:.3e}",
            check.max_error
        );
    }
}

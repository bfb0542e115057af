//! Finite-difference verification of analytic gradients.
//!
//! Every differentiable operation is checked by comparing the tape's
//! backward pass against central finite differences on random inputs in
//! [-1, 1]. Inputs are nudged away from kink points (relu at zero, clamp
//! boundaries) where a one-sided subgradient and a symmetric difference
//! legitimately disagree.

use crate::error::Result;
use crate::graph::{Graph, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step used by the central difference: f(x+h) - f(x-h) over 2h.
pub const FD_STEP: f64 = 1e-6;

/// A check passes when [`gradient_error`] stays below this.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error < FD_TOLERANCE
    }
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe)?;
        probe[i] = original - h;
        let minus = f(&probe)?;
        probe[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst-case deviation between two gradients: absolute where entries are
/// small, relative where they are large.
pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `build` against finite differences.
///
/// `build` must return a scalar node computed from the given leaves. It is
/// called once with tracked leaves for the analytic pass and repeatedly with
/// perturbed untracked leaves for the numeric pass.
pub fn check_gradients(
    name: impl Into<String>,
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[ValueId]) -> Result<ValueId>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| g.param(t)).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for &id in &ids {
        analytic.extend_from_slice(g.grad(id).expect("tracked leaf gradient"));
    }

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
    let numeric = numeric_gradient(
        |x| {
            let mut g = Graph::new();
            let mut ids = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let values = x[offset..offset + t.len()].to_vec();
                offset += t.len();
                ids.push(g.input(Tensor::new(t.shape().to_vec(), values)?));
            }
            let out = build(&mut g, &ids)?;
            Ok(g.value(out).values()[0])
        },
        &flat,
        FD_STEP,
    )?;

    Ok(GradCheck {
        name: name.into(),
        max_error: gradient_error(&analytic, &numeric),
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), values).expect("matching element count")
}

/// Reduces an op output to a scalar through a fixed random weighting, so
/// that every output element contributes its own direction. A plain sum
/// would hide errors in ops whose totals are invariant (softmax rows always
/// sum to one, for example).
fn weighted(g: &mut Graph, out: ValueId, weights: &Tensor) -> Result<ValueId> {
    let w = g.input(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

/// Runs the finite-difference check over every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    {
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4]);
        let w = random_tensor(&mut rng, &[3, 4]);
        checks.push(check_gradients("add_broadcast", &[a, b], |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let a = random_tensor(&mut rng, &[2, 3, 4]);
        let b = random_tensor(&mut rng, &[2, 3, 1]);
        let w = random_tensor(&mut rng, &[2, 3, 4]);
        checks.push(check_gradients("mul_broadcast", &[a, b], |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 5]);
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("exp", &[x], |g, ids| {
            let y = g.exp(ids[0]);
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 5]);
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("sigmoid", &[x], |g, ids| {
            let y = g.sigmoid(ids[0]);
            weighted(g, y, &w)
        })?);
    }
    {
        let mut x = random_tensor(&mut rng, &[3, 5]);
        for v in x.values_mut() {
            // Keep the finite-difference probe away from the kink at zero.
            if v.abs() < 0.05 {
                *v += if *v >= 0.0 { 0.1 } else { -0.1 };
            }
        }
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("relu", &[x], |g, ids| {
            let y = g.relu(ids[0]);
            weighted(g, y, &w)
        })?);
    }
    {
        let mut x = random_tensor(&mut rng, &[3, 5]);
        for v in x.values_mut() {
            // Stay clear of both clamp boundaries at +/- 0.5.
            if (v.abs() - 0.5).abs() < 0.05 {
                *v += if *v >= 0.0 { 0.1 } else { -0.1 };
            }
        }
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("clamp", &[x], |g, ids| {
            let y = g.clamp(ids[0], -0.5, 0.5)?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[4, 3]);
        let w = random_tensor(&mut rng, &[4, 3]);
        checks.push(check_gradients("scale_shift", &[x], |g, ids| {
            let y = g.scale(ids[0], -2.5);
            let z = g.add_scalar(y, 0.75);
            weighted(g, z, &w)
        })?);
    }
    {
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let w = random_tensor(&mut rng, &[3, 2]);
        checks.push(check_gradients("matmul", &[a, b], |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 4]);
        let w = random_tensor(&mut rng, &[4, 3]);
        checks.push(check_gradients("transpose", &[x], |g, ids| {
            let y = g.transpose(ids[0])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 5]);
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("softmax", &[x], |g, ids| {
            let y = g.softmax(ids[0], 1)?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 6]);
        let gamma = random_tensor(&mut rng, &[6]);
        let beta = random_tensor(&mut rng, &[6]);
        let w = random_tensor(&mut rng, &[3, 6]);
        checks.push(check_gradients(
            "layer_norm",
            &[x, gamma, beta],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                weighted(g, y, &w)
            },
        )?);
    }
    for (name, exclusive) in [("cumsum_exclusive", true), ("cumsum_inclusive", false)] {
        let x = random_tensor(&mut rng, &[2, 4, 3]);
        let w = random_tensor(&mut rng, &[2, 4, 3]);
        checks.push(check_gradients(name, &[x], move |g, ids| {
            let y = g.cumsum(ids[0], 1, exclusive)?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 4, 3]);
        let w = random_tensor(&mut rng, &[2, 3]);
        checks.push(check_gradients("sum_axis", &[x], |g, ids| {
            let y = g.sum_axis(ids[0], 1)?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 4, 3]);
        let w = random_tensor(&mut rng, &[2, 3]);
        checks.push(check_gradients("mean_axis", &[x], |g, ids| {
            let y = g.mean_axis(ids[0], 1)?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[3, 4]);
        checks.push(check_gradients("sum_all", &[x], |g, ids| {
            Ok(g.sum_all(ids[0]))
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[2, 6]);
        let w = random_tensor(&mut rng, &[3, 4]);
        checks.push(check_gradients("reshape", &[x], |g, ids| {
            let y = g.reshape(ids[0], [3, 4])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let x = random_tensor(&mut rng, &[4, 3]);
        let w = random_tensor(&mut rng, &[4, 3]);
        checks.push(check_gradients("slice_concat_rows", &[x], |g, ids| {
            let top = g.slice_rows(ids[0], 0, 2)?;
            let bottom = g.slice_rows(ids[0], 2, 2)?;
            let scaled = g.scale(bottom, 1.5);
            let y = g.concat_rows(&[top, scaled])?;
            weighted(g, y, &w)
        })?);
    }
    {
        let a = random_tensor(&mut rng, &[3, 2]);
        let b = random_tensor(&mut rng, &[3, 3]);
        let w = random_tensor(&mut rng, &[3, 5]);
        checks.push(check_gradients("concat_cols", &[a, b], |g, ids| {
            let y = g.concat_cols(&[ids[0], ids[1]])?;
            weighted(g, y, &w)
        })?);
    }

    Ok(checks)
}

/// Finite-difference check of the complete attention pipeline: a 2-ray,
/// 3-sample, width-4, 2-head model, every parameter tensor perturbed in
/// turn against the tape gradients of a weighted output sum.
pub fn full_model_check(seed: u64) -> Result<GradCheck> {
    use crate::attention::AttentionMode;
    use crate::model::{ModelConfig, NerfaModel, Variant};
    use crate::rays::{sample_ray_points, RayBatch, SampleMode};

    let model = NerfaModel::new(ModelConfig {
        variant: Variant::Nerfa,
        d: 4,
        heads: 2,
        layers: 1,
        freq_pos: 1,
        freq_dir: 1,
        attention_mode: AttentionMode::Projected,
        seed,
    })?;

    let (n_p, n_r) = (2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234_5678);
    let origins = random_tensor(&mut rng, &[n_p, 3]);
    let mut directions = random_tensor(&mut rng, &[n_p, 3]);
    for row in directions.values_mut().chunks_exact_mut(3) {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2])
            .sqrt()
            .max(1e-3);
        for v in row {
            *v /= norm;
        }
    }
    let rays = RayBatch {
        origins,
        directions,
    };
    let batch = sample_ray_points(&rays, n_r, 2.0, 6.0, SampleMode::Uniform)?;
    let weights = random_tensor(&mut rng, &[n_p, 3]);

    let loss_for = |m: &NerfaModel| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let traced = m.forward_traced(&mut g, &batch, true)?;
        let loss = weighted(&mut g, traced.color, &weights)?;
        g.backward(loss)?;
        let grads = traced
            .bindings
            .iter()
            .map(|(_, id)| g.grad(*id).expect("tracked parameter").to_vec())
            .collect();
        Ok((g.value(loss).values()[0], grads))
    };
    let (_, analytic) = loss_for(&model)?;

    let mut names = Vec::new();
    model.visit_params(&mut |name, _| names.push(name));
    let mut max_error: f64 = 0.0;
    for (param_index, name) in names.iter().enumerate() {
        let mut flat = Vec::new();
        model.visit_params(&mut |n, t| {
            if &n == name {
                flat = t.values().to_vec();
            }
        });
        let numeric = numeric_gradient(
            |x| {
                let mut probe = model.clone();
                probe.visit_params_mut(&mut |n, t| {
                    if &n == name {
                        t.values_mut().copy_from_slice(x);
                    }
                });
                Ok(loss_for(&probe)?.0)
            },
            &flat,
            FD_STEP,
        )?;
        max_error = max_error.max(gradient_error(&analytic[param_index], &numeric));
    }

    Ok(GradCheck {
        name: "nerfa_forward_full".into(),
        max_error,
    })
}

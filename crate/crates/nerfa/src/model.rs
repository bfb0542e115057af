//! Model variants, parameters, and the forward pipeline.
//!
//! The attention renderer maps a batch of ray points `(N_p, N_r, 6)` to one
//! RGB color per ray. The full pipeline embeds each point, runs a
//! transformer over the points of each ray, collapses the ray axis with
//! transmittance-weighted feature modulation, runs a transformer across
//! rays, and finishes with a linear head and sigmoid.
//!
//! Ablations switch individual stages off:
//!
//! * `vania`: one transformer over all `N_p * N_r` tokens jointly, then a
//!   plain mean over each ray's tokens. The quadratic-cost reference point.
//! * `no_fm`: feature modulation replaced by a mean over the ray axis.
//! * `no_rt`: the per-ray transformer removed; embeddings feed modulation
//!   directly.
//! * `no_pt`: the cross-ray transformer removed; modulated features go
//!   straight to the head.
//!
//! The `nerf` variant is a classical field network: an MLP produces density
//! and color per point and [`nerf_render`]'s compositing equation produces
//! the pixel. The same equation, in closed form over a known field, is the
//! oracle the modulation tests check against.

use crate::attention::{
    transformer_block, AttentionMode, BlockParams, BoundBlock,
};
use crate::embed::{cos_embed, cos_embed_dim, embed, EmbedderParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::params::{init_rng, Binder, BoundLinear, Linear};
use crate::rays::RayPointBatch;
use crate::tensor::Tensor;

/// Depth of the field network's shared trunk.
const FIELD_TRUNK_LAYERS: usize = 8;

/// Which model to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full pipeline: ray transformer, feature modulation, pixel transformer.
    Nerfa,
    /// Single global transformer over every point token.
    Vania,
    /// Mean pooling in place of feature modulation.
    NoFm,
    /// No per-ray transformer.
    NoRt,
    /// No cross-ray transformer.
    NoPt,
    /// Classical density/color field rendered by compositing.
    Nerf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Nerfa => "nerfa",
            Variant::Vania => "vania",
            Variant::NoFm => "no_fm",
            Variant::NoRt => "no_rt",
            Variant::NoPt => "no_pt",
            Variant::Nerf => "nerf",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "nerfa" => Ok(Variant::Nerfa),
            "vania" => Ok(Variant::Vania),
            "no_fm" => Ok(Variant::NoFm),
            "no_rt" => Ok(Variant::NoRt),
            "no_pt" => Ok(Variant::NoPt),
            "nerf" => Ok(Variant::Nerf),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected nerfa, vania, no_fm, no_rt, no_pt, or nerf)"
            ))),
        }
    }

    /// Every attention-based variant, in comparison-table order.
    pub fn attention_variants() -> [Variant; 5] {
        [
            Variant::Nerfa,
            Variant::Vania,
            Variant::NoFm,
            Variant::NoRt,
            Variant::NoPt,
        ]
    }

    fn has_global(self) -> bool {
        self == Variant::Vania
    }

    fn has_ray_transformer(self) -> bool {
        matches!(self, Variant::Nerfa | Variant::NoFm | Variant::NoPt)
    }

    fn has_pixel_transformer(self) -> bool {
        matches!(self, Variant::Nerfa | Variant::NoFm | Variant::NoRt)
    }
}

/// Everything that determines the parameter set and forward wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Token width.
    pub d: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Layers per transformer block.
    pub layers: usize,
    /// Positional embedding frequencies for the point coordinates.
    pub freq_pos: usize,
    /// Frequencies for the direction coordinates.
    pub freq_dir: usize,
    pub attention_mode: AttentionMode,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("model width d must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layer count must be positive".into()));
        }
        if self.attention_mode == AttentionMode::Projected
            && (self.heads == 0 || self.d % self.heads != 0)
        {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    fn embed_dim(&self) -> usize {
        cos_embed_dim(self.freq_pos, self.freq_dir)
    }
}

/// Parameters of the attention-based variants.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionNetParams {
    pub embedder: EmbedderParams,
    pub global: Option<BlockParams>,
    pub ray: Option<BlockParams>,
    pub pixel: Option<BlockParams>,
    /// Final `d -> 3` projection, before the sigmoid.
    pub head: Linear,
}

/// Parameters of the classical field network.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldNetParams {
    /// ReLU MLP from the frequency features, all hidden widths equal.
    pub trunk: Vec<Linear>,
    /// Density head; ReLU keeps density non-negative.
    pub sigma: Linear,
    pub color_hidden: Linear,
    /// Color head, before the sigmoid.
    pub color: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Attention(AttentionNetParams),
    Field(FieldNetParams),
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NerfaModel {
    config: ModelConfig,
    params: ModelParams,
}

/// Handles returned by [`NerfaModel::forward_traced`].
pub struct TracedForward {
    /// Predicted colors, shape `(N_p, 3)`.
    pub color: ValueId,
    /// Parameter name and node for every bound tensor, in canonical order.
    pub bindings: Vec<(String, ValueId)>,
    /// The leaf the network consumes: flattened `(N_p * N_r, 6)` ray points
    /// for attention variants, frequency features for the field variant.
    /// Tracked (receives a gradient) when the forward was built with
    /// `track`, which is how ray-locality claims are checked end to end.
    pub input: ValueId,
}

impl NerfaModel {
    /// Initializes parameters from the config seed.
    ///
    /// Draw order is fixed: embedder, then global, ray, and pixel blocks
    /// (those that exist), then the head. Checkpoints and the optimizer
    /// rely on the same order, via [`NerfaModel::visit_params`].
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed);
        let params = match config.variant {
            Variant::Nerf => {
                let feature_dim = config.embed_dim();
                let width = config.d;
                let mut trunk = Vec::with_capacity(FIELD_TRUNK_LAYERS);
                let mut fan_in = feature_dim;
                for _ in 0..FIELD_TRUNK_LAYERS {
                    trunk.push(Linear::init(&mut rng, fan_in, width, true));
                    fan_in = width;
                }
                ModelParams::Field(FieldNetParams {
                    trunk,
                    sigma: Linear::init(&mut rng, width, 1, true),
                    color_hidden: Linear::init(&mut rng, width, width, true),
                    color: Linear::init(&mut rng, width, 3, true),
                })
            }
            variant => {
                fn block(
                    rng: &mut crate::params::InitRng,
                    config: &ModelConfig,
                    wanted: bool,
                ) -> Result<Option<BlockParams>> {
                    if !wanted {
                        return Ok(None);
                    }
                    Ok(Some(BlockParams::init(
                        rng,
                        config.attention_mode,
                        config.d,
                        config.heads,
                        config.layers,
                    )?))
                }
                let embedder = EmbedderParams::init(
                    &mut rng,
                    config.d,
                    config.freq_pos,
                    config.freq_dir,
                );
                let global = block(&mut rng, &config, variant.has_global())?;
                let ray = block(&mut rng, &config, variant.has_ray_transformer())?;
                let pixel = block(&mut rng, &config, variant.has_pixel_transformer())?;
                let head = Linear::init(&mut rng, config.d, 3, true);
                ModelParams::Attention(AttentionNetParams {
                    embedder,
                    global,
                    ray,
                    pixel,
                    head,
                })
            }
        };
        Ok(NerfaModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Visits every parameter tensor in canonical (bind) order.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        match &self.params {
            ModelParams::Attention(p) => {
                p.embedder.for_each("embed", f);
                if let Some(b) = &p.global {
                    b.for_each("global", f);
                }
                if let Some(b) = &p.ray {
                    b.for_each("ray", f);
                }
                if let Some(b) = &p.pixel {
                    b.for_each("pixel", f);
                }
                p.head.for_each("head", f);
            }
            ModelParams::Field(p) => {
                for (i, layer) in p.trunk.iter().enumerate() {
                    layer.for_each(&format!("trunk.{i}"), f);
                }
                p.sigma.for_each("sigma", f);
                p.color_hidden.for_each("color_hidden", f);
                p.color.for_each("color", f);
            }
        }
    }

    /// Mutable twin of [`NerfaModel::visit_params`], same order.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match &mut self.params {
            ModelParams::Attention(p) => {
                p.embedder.for_each_mut("embed", f);
                if let Some(b) = &mut p.global {
                    b.for_each_mut("global", f);
                }
                if let Some(b) = &mut p.ray {
                    b.for_each_mut("ray", f);
                }
                if let Some(b) = &mut p.pixel {
                    b.for_each_mut("pixel", f);
                }
                p.head.for_each_mut("head", f);
            }
            ModelParams::Field(p) => {
                for (i, layer) in p.trunk.iter_mut().enumerate() {
                    layer.for_each_mut(&format!("trunk.{i}"), f);
                }
                p.sigma.for_each_mut("sigma", f);
                p.color_hidden.for_each_mut("color_hidden", f);
                p.color.for_each_mut("color", f);
            }
        }
    }

    /// Total scalar parameter count. Depends only on the config.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, t| count += t.len());
        count
    }

    /// Runs the forward pass and returns the `(N_p, 3)` colors.
    pub fn forward(&self, batch: &RayPointBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let traced = self.forward_traced(&mut g, batch, false)?;
        Ok(g.value(traced.color).clone())
    }

    /// Builds the forward graph on `g`. With `track` set, parameters enter
    /// as tracked leaves so a later backward pass fills their gradients.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        batch: &RayPointBatch,
        track: bool,
    ) -> Result<TracedForward> {
        let n_p = batch.n_rays();
        let n_r = batch.n_samples();
        let flat_points = batch.points.clone().reshaped([n_p * n_r, 6])?;
        match &self.params {
            ModelParams::Attention(params) => {
                let mut binder = Binder::new(g, track);
                let embedder = params.embedder.bind(&mut binder, "embed");
                let global = params
                    .global
                    .as_ref()
                    .map(|b| b.bind(&mut binder, "global"));
                let ray = params.ray.as_ref().map(|b| b.bind(&mut binder, "ray"));
                let pixel = params.pixel.as_ref().map(|b| b.bind(&mut binder, "pixel"));
                let head = params.head.bind(&mut binder, "head");
                let bindings = binder.into_bindings();

                let points = if track {
                    g.param(&flat_points)
                } else {
                    g.input(flat_points)
                };
                let tokens = embed(
                    g,
                    &embedder,
                    points,
                    self.config.freq_pos,
                    self.config.freq_dir,
                )?;

                let pooled = if let Some(global) = &global {
                    // Joint attention over all N_p * N_r tokens, then a
                    // plain mean over each ray's tokens.
                    let mixed = transformer_block(g, tokens, global)?;
                    let cube = g.reshape(mixed, [n_p, n_r, self.config.d])?;
                    g.mean_axis(cube, 1)?
                } else {
                    let per_view = match &ray {
                        Some(block) => ray_transformer(g, tokens, n_p, n_r, block)?,
                        None => tokens,
                    };
                    let cube = g.reshape(per_view, [n_p, n_r, self.config.d])?;
                    if self.config.variant == Variant::NoFm {
                        g.mean_axis(cube, 1)?
                    } else {
                        let deltas = g.input(batch.deltas.clone());
                        feature_modulation(g, cube, deltas)?
                    }
                };

                let mixed = match &pixel {
                    Some(block) => transformer_block(g, pooled, block)?,
                    None => pooled,
                };
                let logits = head.apply(g, mixed)?;
                let color = g.sigmoid(logits);
                Ok(TracedForward {
                    color,
                    bindings,
                    input: points,
                })
            }
            ModelParams::Field(params) => {
                let mut binder = Binder::new(g, track);
                let trunk: Vec<BoundLinear> = params
                    .trunk
                    .iter()
                    .enumerate()
                    .map(|(i, layer)| layer.bind(&mut binder, &format!("trunk.{i}")))
                    .collect();
                let sigma_head = params.sigma.bind(&mut binder, "sigma");
                let color_hidden = params.color_hidden.bind(&mut binder, "color_hidden");
                let color_head = params.color.bind(&mut binder, "color");
                let bindings = binder.into_bindings();

                let encoded = cos_embed(&flat_points, self.config.freq_pos, self.config.freq_dir)?;
                let features = if track {
                    g.param(&encoded)
                } else {
                    g.input(encoded)
                };
                let mut h = features;
                for layer in &trunk {
                    let z = layer.apply(g, h)?;
                    h = g.relu(z);
                }
                let sigma_raw = sigma_head.apply(g, h)?;
                let sigma = g.relu(sigma_raw);
                let ch_raw = color_hidden.apply(g, h)?;
                let ch = g.relu(ch_raw);
                let color_logits = color_head.apply(g, ch)?;
                let point_color = g.sigmoid(color_logits);

                let sigma = g.reshape(sigma, [n_p, n_r])?;
                let point_color = g.reshape(point_color, [n_p, n_r, 3])?;
                let deltas = g.input(batch.deltas.clone());
                let color = composite(g, sigma, point_color, deltas)?;
                Ok(TracedForward {
                    color,
                    bindings,
                    input: features,
                })
            }
        }
    }
}

/// Applies `block` to each ray's `N_r` tokens independently.
///
/// `tokens` is `(N_p * N_r, d)` with each ray's samples contiguous. Rays
/// never attend to each other here; the cross-ray Jacobian blocks of this
/// stage are exactly zero.
pub fn ray_transformer(
    g: &mut Graph,
    tokens: ValueId,
    n_p: usize,
    n_r: usize,
    block: &BoundBlock,
) -> Result<ValueId> {
    let shape = g.value(tokens).shape();
    if shape.len() != 2 || shape[0] != n_p * n_r {
        return Err(Error::Shape(format!(
            "ray_transformer expects ({} * {}, d) tokens, got {:?}",
            n_p, n_r, shape
        )));
    }
    let mut per_ray = Vec::with_capacity(n_p);
    for p in 0..n_p {
        let slice = g.slice_rows(tokens, p * n_r, n_r)?;
        per_ray.push(transformer_block(g, slice, block)?);
    }
    g.concat_rows(&per_ray)
}

/// Applies `block` across the `N_p` per-ray feature vectors.
pub fn pixel_transformer(g: &mut Graph, features: ValueId, block: &BoundBlock) -> Result<ValueId> {
    transformer_block(g, features, block)
}

/// Collapses the ray axis by transmittance-weighted summation, per channel.
///
/// For features `F` of shape `(N_p, N_r, d)` and spacings `delta` of shape
/// `(N_p, N_r)`, each channel `k` of the output is
///
/// ```text
/// out[p, k] = sum_i exp(-sum_{j<i} F[p,j,k] delta[p,j])
///             * (1 - exp(-F[p,i,k] delta[p,i])) * F[p,i,k]
/// ```
///
/// which is the compositing equation with the feature channel standing in
/// for both density and radiance. Channels never mix.
pub fn feature_modulation(g: &mut Graph, features: ValueId, deltas: ValueId) -> Result<ValueId> {
    let f_shape = g.value(features).shape().to_vec();
    let d_shape = g.value(deltas).shape().to_vec();
    if f_shape.len() != 3 {
        return Err(Error::Shape(format!(
            "feature_modulation expects (N_p, N_r, d) features, got {:?}",
            f_shape
        )));
    }
    if d_shape != f_shape[..2] {
        return Err(Error::Shape(format!(
            "feature_modulation deltas {:?} do not match features {:?}",
            d_shape, f_shape
        )));
    }
    let deltas3 = g.reshape(deltas, [f_shape[0], f_shape[1], 1])?;
    let scaled = g.mul(features, deltas3)?;
    let behind = g.cumsum(scaled, 1, true)?;
    let neg_behind = g.neg(behind);
    let transmittance = g.exp(neg_behind);
    let neg_scaled = g.neg(scaled);
    let passthrough = g.exp(neg_scaled);
    let neg_passthrough = g.neg(passthrough);
    let opacity = g.add_scalar(neg_passthrough, 1.0);
    let visible = g.mul(transmittance, opacity)?;
    let weighted = g.mul(visible, features)?;
    g.sum_axis(weighted, 1)
}

/// Differentiable compositing of per-point density and color into per-ray
/// color. Same recurrence as [`nerf_render`], built on the tape.
fn composite(
    g: &mut Graph,
    sigma: ValueId,
    color: ValueId,
    deltas: ValueId,
) -> Result<ValueId> {
    let shape = g.value(sigma).shape().to_vec();
    let (n_p, n_r) = (shape[0], shape[1]);
    let scaled = g.mul(sigma, deltas)?;
    let behind = g.cumsum(scaled, 1, true)?;
    let neg_behind = g.neg(behind);
    let transmittance = g.exp(neg_behind);
    let neg_scaled = g.neg(scaled);
    let passthrough = g.exp(neg_scaled);
    let neg_passthrough = g.neg(passthrough);
    let alpha = g.add_scalar(neg_passthrough, 1.0);
    let weights = g.mul(transmittance, alpha)?;
    let weights3 = g.reshape(weights, [n_p, n_r, 1])?;
    let weighted = g.mul(weights3, color)?;
    g.sum_axis(weighted, 1)
}

/// A sampled density/color field along a batch of rays, ready to composite.
#[derive(Clone, Debug)]
pub struct SigmaColorField {
    /// Densities, shape `(N_p, N_r)`, all non-negative.
    pub sigma: Tensor,
    /// Point colors, shape `(N_p, N_r, 3)`.
    pub color: Tensor,
    /// Sample spacings, shape `(N_p, N_r)`.
    pub deltas: Tensor,
}

/// Classical volumetric compositing, straight loops and no tape.
///
/// For each ray: `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i` with
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`. Returns `(N_p, 3)` colors.
/// Negative densities are a domain error.
pub fn nerf_render(field: &SigmaColorField) -> Result<Tensor> {
    let s_shape = field.sigma.shape();
    if s_shape.len() != 2 {
        return Err(Error::Shape(format!(
            "nerf_render expects (N_p, N_r) densities, got {:?}",
            s_shape
        )));
    }
    let (n_p, n_r) = (s_shape[0], s_shape[1]);
    if field.deltas.shape() != [n_p, n_r] {
        return Err(Error::Shape(format!(
            "nerf_render deltas {:?} do not match densities {:?}",
            field.deltas.shape(),
            s_shape
        )));
    }
    if field.color.shape() != [n_p, n_r, 3] {
        return Err(Error::Shape(format!(
            "nerf_render colors {:?} do not match densities {:?}",
            field.color.shape(),
            s_shape
        )));
    }
    let sigma = field.sigma.values();
    let color = field.color.values();
    let deltas = field.deltas.values();
    let mut out = vec![0.0; n_p * 3];
    for p in 0..n_p {
        let mut behind: f64 = 0.0;
        for i in 0..n_r {
            let s = sigma[p * n_r + i];
            if s < 0.0 {
                return Err(Error::Domain(format!(
                    "negative density {s} at ray {p}, sample {i}"
                )));
            }
            let step = s * deltas[p * n_r + i];
            let transmittance = (-behind).exp();
            let alpha = 1.0 - (-step).exp();
            let w = transmittance * alpha;
            for k in 0..3 {
                out[p * 3 + k] += w * color[(p * n_r + i) * 3 + k];
            }
            behind += step;
        }
    }
    Tensor::new([n_p, 3], out)
}

/// Multiply-add counts for the attention stages at a given batch size.
///
/// Only score and value products count, per layer: a token matrix of `n`
/// rows and width `d` costs `2 n^2 d`. The global path attends over all
/// `N_p * N_r` tokens at once; the ray path runs `N_p` blocks of `N_r`
/// tokens; the pixel path one block of `N_p` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMadds {
    pub global: u64,
    pub ray: u64,
    pub pixel: u64,
}

pub fn count_madds(config: &ModelConfig, n_p: usize, n_r: usize) -> AttentionMadds {
    let l = config.layers as u64;
    let d = config.d as u64;
    let (n_p, n_r) = (n_p as u64, n_r as u64);
    let tokens = n_p * n_r;
    AttentionMadds {
        global: l * 2 * tokens * tokens * d,
        ray: l * n_p * 2 * n_r * n_r * d,
        pixel: l * 2 * n_p * n_p * d,
    }
}

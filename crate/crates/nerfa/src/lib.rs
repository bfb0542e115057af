//! Attention-based novel view synthesis at desk scale.
//!
//! The crate implements a sequence-to-sequence view synthesis model: batches
//! of rays are embedded, refined by a per-ray transformer, collapsed along
//! each ray by a transmittance-weighted feature modulation, mixed across
//! pixels by a second transformer, and decoded to colors. A classical
//! volumetric renderer over explicit densities doubles as the reference
//! implementation for the modulation math and as a trainable baseline.
//!
//! Everything is dense `f64` on a define-by-run reverse-mode tape; there are
//! no external numeric dependencies, so results are deterministic for a
//! given seed.

pub mod attention;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rays;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, ValueId};
pub use model::{NerfaModel, Variant};
pub use tensor::Tensor;

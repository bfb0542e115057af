//! Dense row-major tensors over `f64`.
//!
//! Every value in the engine lives in a [`Tensor`]: a shape vector plus a
//! contiguous buffer in row-major order. There is no stride trickery; a
//! reshape of a tensor is always a reinterpretation of the same contiguous
//! buffer. Gradients are carried as an optional second buffer of the same
//! length, filled in by [`crate::graph::Graph::backward`] for tracked leaves.

use crate::error::{Error, Result};

/// A dense tensor of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    track: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching value buffer.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = element_count(&shape);
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, got {}",
                format_shape(&shape),
                expected,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            track: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = element_count(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
            track: false,
        }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = element_count(&shape);
        Tensor {
            shape,
            values: vec![value; n],
            grad: None,
            track: false,
        }
    }

    /// A rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
            track: false,
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Gradient buffer, present on tracked leaves after a backward pass.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    /// Whether backward should deposit a gradient on this tensor.
    pub fn track(&self) -> bool {
        self.track
    }

    pub fn set_track(&mut self, track: bool) {
        self.track = track;
    }

    pub fn tracked(mut self) -> Self {
        self.track = true;
        self
    }

    /// Single element by multi-index. Panics on rank mismatch, errors on
    /// out-of-range coordinates.
    pub fn at(&self, index: &[usize]) -> Result<f64> {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (k, (&i, &dim)) in index.iter().zip(&self.shape).enumerate() {
            if i >= dim {
                return Err(Error::Bounds(format!(
                    "index {i} exceeds dimension {dim} at axis {k} of shape {}",
                    format_shape(&self.shape)
                )));
            }
            flat = flat * dim + i;
        }
        Ok(self.values[flat])
    }

    /// Same buffer under a new shape. The buffer is always contiguous
    /// row-major, so this never copies.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if element_count(&shape) != self.values.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                format_shape(&self.shape),
                self.values.len(),
                format_shape(&shape),
                element_count(&shape)
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn format_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join(", "))
}

/// Result shape of broadcasting `a` against `b`.
///
/// Shapes are aligned at their trailing axes; each aligned pair must be equal
/// or contain a 1, which is stretched to the other size. This is the only
/// broadcasting rule in the crate and only `add`/`mul` use it.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = dim_from_end(a, rank - 1 - k);
        let db = dim_from_end(b, rank - 1 - k);
        out[k] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::Shape(format!(
                "cannot broadcast {} with {}",
                format_shape(a),
                format_shape(b)
            )));
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], back: usize) -> usize {
    if back < shape.len() {
        shape[shape.len() - 1 - back]
    } else {
        1
    }
}

/// Flat strides of `shape` right-aligned into an output of rank `out_rank`,
/// with stride 0 on broadcast (size-1 or missing) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0; out_rank];
    let offset = out_rank - shape.len();
    let mut step = 1;
    for k in (0..shape.len()).rev() {
        if shape[k] != 1 {
            strides[offset + k] = step;
        }
        step *= shape[k];
    }
    strides
}

/// Calls `f(out_flat, a_flat, b_flat)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast_pair(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let total = element_count(out_shape);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..total {
        f(flat, ia, ib);
        for k in (0..rank).rev() {
            coords[k] += 1;
            ia += sa[k];
            ib += sb[k];
            if coords[k] < out_shape[k] {
                break;
            }
            coords[k] = 0;
            ia -= sa[k] * out_shape[k];
            ib -= sb[k] * out_shape[k];
        }
    }
}

/// View of a tensor as (outer, axis, inner) blocks around one axis. Slices
/// along `axis` start at `outer * axis_len * inner + inner_idx` and step by
/// `inner`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisView {
    pub outer: usize,
    pub axis_len: usize,
    pub inner: usize,
}

pub(crate) fn axis_view(shape: &[usize], axis: usize) -> Result<AxisView> {
    if axis >= shape.len() {
        return Err(Error::Bounds(format!(
            "axis {axis} out of range for shape {}",
            format_shape(shape)
        )));
    }
    Ok(AxisView {
        outer: shape[..axis].iter().product(),
        axis_len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    })
}

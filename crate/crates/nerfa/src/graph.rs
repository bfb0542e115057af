//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape. Every operation appends one node holding the result
//! tensor together with a record of how it was produced, and returns a
//! [`ValueId`] handle. The graph is rebuilt from scratch on every forward
//! pass; nothing is retained between passes. [`Graph::backward`] seeds the
//! scalar output with 1 and replays the tape in exact reverse creation order,
//! so node indices double as a topological order and gradients are bitwise
//! reproducible for identical graphs.
//!
//! Only `add` and `mul` broadcast, using the trailing-axis rule described in
//! [`crate::tensor`]. Everything else demands exact shapes and reports both
//! offenders on mismatch.

use crate::error::{Error, Result};
use crate::tensor::{
    axis_view, broadcast_shape, element_count, for_each_broadcast_pair, format_shape, AxisView,
    Tensor,
};

/// Inputs to `exp` are clamped to `[-EXP_CLAMP, EXP_CLAMP]` before
/// exponentiation, with zero gradient outside the clamp.
pub const EXP_CLAMP: f64 = 60.0;

/// Epsilon inside the layer-norm square root. Small enough that inputs with
/// unit variance normalize to within 1e-6 of variance one.
pub const LN_EPSILON: f64 = 1e-8;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Exp(ValueId),
    Sigmoid(ValueId),
    Relu(ValueId),
    Clamp { x: ValueId, lo: f64, hi: f64 },
    Scale { x: ValueId, factor: f64 },
    AddScalar { x: ValueId },
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Softmax { x: ValueId, axis: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId },
    CumSum { x: ValueId, axis: usize, exclusive: bool },
    SumAxis { x: ValueId, axis: usize },
    MeanAxis { x: ValueId, axis: usize },
    SumAll(ValueId),
    Reshape(ValueId),
    ConcatRows(Vec<ValueId>),
    ConcatCols(Vec<ValueId>),
    SliceRows { x: ValueId, start: usize, rows: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Define-by-run tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    matmul_madds: u64,
    attention_madds: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an untracked leaf (input data, constants).
    pub fn input(&mut self, mut tensor: Tensor) -> ValueId {
        tensor.set_track(false);
        tensor.set_grad(None);
        self.push(tensor, Op::Leaf)
    }

    /// Registers a tracked leaf. Backward will deposit a gradient on it.
    pub fn param(&mut self, tensor: &Tensor) -> ValueId {
        let mut t = tensor.clone();
        t.set_track(true);
        t.set_grad(None);
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Total multiply-adds executed by `matmul` so far.
    pub fn matmul_madds(&self) -> u64 {
        self.matmul_madds
    }

    /// Multiply-adds attributed to attention score and value products.
    pub fn attention_madds(&self) -> u64 {
        self.attention_madds
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> ValueId {
        self.nodes.push(Node { tensor, op });
        ValueId(self.nodes.len() - 1)
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    fn vals(&self, id: ValueId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; element_count(&shape)];
        {
            let (va, vb) = (self.vals(a), self.vals(b));
            for_each_broadcast_pair(&shape, self.shape(a), self.shape(b), |o, ia, ib| {
                out[o] = va[ia] + vb[ib];
            });
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    /// Elementwise (Hadamard) product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; element_count(&shape)];
        {
            let (va, vb) = (self.vals(a), self.vals(b));
            for_each_broadcast_pair(&shape, self.shape(a), self.shape(b), |o, ia, ib| {
                out[o] = va[ia] * vb[ib];
            });
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    /// Negation, realized exactly as scaling by -1.
    pub fn neg(&mut self, x: ValueId) -> ValueId {
        self.scale(x, -1.0)
    }

    /// `a - b`, as `a + (-b)`.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Exponential with the input clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
    /// The gradient is zero wherever the clamp is active.
    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self
            .vals(x)
            .iter()
            .map(|&v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu(x))
    }

    /// Clamp to `[lo, hi]`; the gradient passes inside the interval
    /// (inclusive) and is zero outside.
    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo <= hi) {
            return Err(Error::Domain(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Clamp { x, lo, hi }))
    }

    /// Multiplication by a constant factor.
    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale { x, factor },
        )
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, x: ValueId, addend: f64) -> ValueId {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| v + addend).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::AddScalar { x },
        )
    }

    /// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul needs (m,k) x (k,n), got {} x {}",
                format_shape(sa),
                format_shape(sb)
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.vals(a), self.vals(b), m, k, n);
        self.matmul_madds += (m * k * n) as u64;
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    /// Matrix product whose multiply-adds count as attention work. The
    /// attention layer uses this for its score and value products only, so
    /// the counter can be compared against closed-form complexity numbers.
    pub fn matmul_attention(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let before = self.matmul_madds;
        let id = self.matmul(a, b)?;
        self.attention_madds += self.matmul_madds - before;
        Ok(id)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose needs a 2-D tensor, got {}",
                format_shape(s)
            )));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.vals(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    /// Softmax along `axis`, computed with max subtraction. Every slice of
    /// the output sums to 1.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let view = axis_view(self.shape(x), axis)?;
        let v = self.vals(x);
        let mut out = vec![0.0; v.len()];
        for_each_axis_slice(view, |base, stride| {
            let mut max = f64::NEG_INFINITY;
            for i in 0..view.axis_len {
                max = max.max(v[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..view.axis_len {
                let e = (v[base + i * stride] - max).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..view.axis_len {
                out[base + i * stride] /= sum;
            }
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// `gamma` and `beta` must be vectors of the last-axis length.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        let d = match s.last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(Error::Shape(format!(
                    "layer_norm needs a non-empty last axis, got {}",
                    format_shape(s)
                )))
            }
        };
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} must have shape [{d}], got {}",
                    format_shape(self.shape(id))
                )));
            }
        }
        let v = self.vals(x);
        let g = self.vals(gamma);
        let b = self.vals(beta);
        let mut out = vec![0.0; v.len()];
        for (chunk, o) in v.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, inv) = layer_norm_stats(chunk);
            for i in 0..d {
                o[i] = g[i] * ((chunk[i] - mean) * inv) + b[i];
            }
        }
        let shape = s.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta }))
    }

    /// Cumulative sum along `axis`. With `exclusive` set, element `i` holds
    /// the sum of elements strictly before it (so element 0 is 0).
    pub fn cumsum(&mut self, x: ValueId, axis: usize, exclusive: bool) -> Result<ValueId> {
        let view = axis_view(self.shape(x), axis)?;
        let v = self.vals(x);
        let mut out = vec![0.0; v.len()];
        for_each_axis_slice(view, |base, stride| {
            let mut running = 0.0;
            for i in 0..view.axis_len {
                let idx = base + i * stride;
                if exclusive {
                    out[idx] = running;
                    running += v[idx];
                } else {
                    running += v[idx];
                    out[idx] = running;
                }
            }
        });
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::CumSum { x, axis, exclusive }))
    }

    /// Sum along `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let (shape, out) = self.reduce_axis(x, axis, false)?;
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let (shape, out) = self.reduce_axis(x, axis, true)?;
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }))
    }

    fn reduce_axis(&self, x: ValueId, axis: usize, mean: bool) -> Result<(Vec<usize>, Vec<f64>)> {
        let view = axis_view(self.shape(x), axis)?;
        let v = self.vals(x);
        let mut out = vec![0.0; view.outer * view.inner];
        for o in 0..view.outer {
            for r in 0..view.inner {
                let base = o * view.axis_len * view.inner + r;
                let mut sum = 0.0;
                for i in 0..view.axis_len {
                    sum += v[base + i * view.inner];
                }
                out[o * view.inner + r] = if mean { sum / view.axis_len as f64 } else { sum };
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let sum: f64 = self.vals(x).iter().sum();
        self.push(Tensor::scalar(sum), Op::SumAll(x))
    }

    /// Same buffer under a new shape (element counts must match).
    pub fn reshape(&mut self, x: ValueId, shape: impl Into<Vec<usize>>) -> Result<ValueId> {
        let shape = shape.into();
        if element_count(&shape) != self.vals(x).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} to {}",
                format_shape(self.shape(x)),
                format_shape(&shape)
            )));
        }
        let t = Tensor::new(shape, self.vals(x).to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Stacks 2-D blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let cols = self.expect_2d(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.expect_2d(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    format_shape(self.shape(parts[0])),
                    format_shape(self.shape(p))
                )));
            }
            rows += r;
            out.extend_from_slice(self.vals(p));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins 2-D blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.expect_2d(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.expect_2d(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {}",
                    format_shape(self.shape(parts[0])),
                    format_shape(self.shape(p))
                )));
            }
            widths.push(c);
            cols += c;
        }
        let mut out = vec![0.0; rows * cols];
        let mut col_off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.vals(p);
            for i in 0..rows {
                out[i * cols + col_off..i * cols + col_off + w]
                    .copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            col_off += w;
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Contiguous row range `[start, start+rows)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, rows: usize) -> Result<ValueId> {
        let (r, c) = self.expect_2d(x, "slice_rows")?;
        if start + rows > r {
            return Err(Error::Bounds(format!(
                "slice_rows [{start}, {}) exceeds {r} rows",
                start + rows
            )));
        }
        let out = self.vals(x)[start * c..(start + rows) * c].to_vec();
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::SliceRows { x, start, rows }))
    }

    fn expect_2d(&self, x: ValueId, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "{what} needs a 2-D tensor, got {}",
                format_shape(s)
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Reverse-mode sweep from a scalar output. Deposits gradients on every
    /// tracked leaf (zeros if the leaf does not influence the output) and
    /// leaves untracked tensors untouched.
    pub fn backward(&mut self, output: ValueId) -> Result<()> {
        if self.nodes[output.0].tensor.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {}",
                format_shape(self.shape(output))
            )));
        }
        let n = self.nodes.len();
        let mut adjoint: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adjoint[output.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(dy) = adjoint[i].take() else { continue };
            self.propagate(ValueId(i), &dy, &mut adjoint);
            adjoint[i] = Some(dy);
        }

        for (i, slot) in adjoint.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if node.tensor.track() && matches!(node.op, Op::Leaf) {
                let grad = slot.unwrap_or_else(|| vec![0.0; node.tensor.len()]);
                node.tensor.set_grad(Some(grad));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: ValueId, dy: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id.0];
        let mut acc = |target: ValueId, contribution: Vec<f64>| match &mut adjoint[target.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = node.tensor.shape();
                for &operand in &[*a, *b] {
                    let mut g = vec![0.0; self.vals(operand).len()];
                    for_each_broadcast_pair(
                        out_shape,
                        self.shape(operand),
                        self.shape(operand),
                        |o, io, _| g[io] += dy[o],
                    );
                    acc(operand, g);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.tensor.shape();
                let (va, vb) = (self.vals(*a), self.vals(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for_each_broadcast_pair(out_shape, self.shape(*a), self.shape(*b), |o, ia, ib| {
                    ga[ia] += dy[o] * vb[ib];
                    gb[ib] += dy[o] * va[ia];
                });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Exp(x) => {
                let xv = self.vals(*x);
                let yv = node.tensor.values();
                let g = xv
                    .iter()
                    .zip(yv)
                    .zip(dy)
                    .map(|((&x, &y), &d)| {
                        if (-EXP_CLAMP..=EXP_CLAMP).contains(&x) {
                            d * y
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let yv = node.tensor.values();
                let g = yv.iter().zip(dy).map(|(&y, &d)| d * y * (1.0 - y)).collect();
                acc(*x, g);
            }
            Op::Relu(x) => {
                let xv = self.vals(*x);
                let g = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.vals(*x);
                let g = xv
                    .iter()
                    .zip(dy)
                    .map(|(&x, &d)| if x >= *lo && x <= *hi { d } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::Scale { x, factor } => {
                acc(*x, dy.iter().map(|&d| d * factor).collect());
            }
            Op::AddScalar { x } => {
                acc(*x, dy.to_vec());
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.vals(*a), self.vals(*b));
                // dA = dY . B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let d = dy[i * n + j];
                        for l in 0..k {
                            ga[i * k + l] += d * vb[l * n + j];
                        }
                    }
                }
                // dB = A^T . dY
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let a_il = va[i * k + l];
                        for j in 0..n {
                            gb[l * n + j] += a_il * dy[i * n + j];
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy[j * r + i];
                    }
                }
                acc(*x, g);
            }
            Op::Softmax { axis, x } => {
                let view = axis_view(node.tensor.shape(), *axis).expect("validated in forward");
                let yv = node.tensor.values();
                let mut g = vec![0.0; yv.len()];
                for_each_axis_slice(view, |base, stride| {
                    let mut dot = 0.0;
                    for i in 0..view.axis_len {
                        let idx = base + i * stride;
                        dot += dy[idx] * yv[idx];
                    }
                    for i in 0..view.axis_len {
                        let idx = base + i * stride;
                        g[idx] = yv[idx] * (dy[idx] - dot);
                    }
                });
                acc(*x, g);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.vals(*x);
                let gv = self.vals(*gamma);
                let d = gv.len();
                let mut gx = vec![0.0; xv.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (row, chunk) in xv.chunks_exact(d).enumerate() {
                    let (mean, inv) = layer_norm_stats(chunk);
                    let dy_row = &dy[row * d..(row + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for i in 0..d {
                        let xhat = (chunk[i] - mean) * inv;
                        let gi = dy_row[i] * gv[i];
                        ggamma[i] += dy_row[i] * xhat;
                        gbeta[i] += dy_row[i];
                        mean_g += gi;
                        mean_gx += gi * xhat;
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for i in 0..d {
                        let xhat = (chunk[i] - mean) * inv;
                        let gi = dy_row[i] * gv[i];
                        gx[row * d + i] = inv * (gi - mean_g - xhat * mean_gx);
                    }
                }
                acc(*x, gx);
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::CumSum { x, axis, exclusive } => {
                let view = axis_view(self.shape(*x), *axis).expect("validated in forward");
                let mut g = vec![0.0; self.vals(*x).len()];
                for_each_axis_slice(view, |base, stride| {
                    let mut running = 0.0;
                    for i in (0..view.axis_len).rev() {
                        let idx = base + i * stride;
                        if *exclusive {
                            g[idx] = running;
                            running += dy[idx];
                        } else {
                            running += dy[idx];
                            g[idx] = running;
                        }
                    }
                });
                acc(*x, g);
            }
            Op::SumAxis { x, axis } => {
                let view = axis_view(self.shape(*x), *axis).expect("validated in forward");
                let mut g = vec![0.0; self.vals(*x).len()];
                spread_axis(view, dy, &mut g, 1.0);
                acc(*x, g);
            }
            Op::MeanAxis { x, axis } => {
                let view = axis_view(self.shape(*x), *axis).expect("validated in forward");
                let mut g = vec![0.0; self.vals(*x).len()];
                spread_axis(view, dy, &mut g, 1.0 / view.axis_len as f64);
                acc(*x, g);
            }
            Op::SumAll(x) => {
                acc(*x, vec![dy[0]; self.vals(*x).len()]);
            }
            Op::Reshape(x) => {
                acc(*x, dy.to_vec());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.vals(p).len();
                    acc(p, dy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.tensor.shape()[0];
                let cols = node.tensor.shape()[1];
                let mut col_off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut g = vec![0.0; rows * w];
                    for i in 0..rows {
                        g[i * w..(i + 1) * w]
                            .copy_from_slice(&dy[i * cols + col_off..i * cols + col_off + w]);
                    }
                    acc(p, g);
                    col_off += w;
                }
            }
            Op::SliceRows { x, start, rows } => {
                let c = self.shape(*x)[1];
                let mut g = vec![0.0; self.vals(*x).len()];
                g[start * c..(start + rows) * c].copy_from_slice(dy);
                acc(*x, g);
            }
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn layer_norm_stats(chunk: &[f64]) -> (f64, f64) {
    let d = chunk.len() as f64;
    let mean = chunk.iter().sum::<f64>() / d;
    let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPSILON).sqrt())
}

/// Calls `f(base, stride)` once per slice along the viewed axis.
fn for_each_axis_slice(view: AxisView, mut f: impl FnMut(usize, usize)) {
    for o in 0..view.outer {
        for r in 0..view.inner {
            f(o * view.axis_len * view.inner + r, view.inner);
        }
    }
}

/// Broadcasts `reduced` (axis removed) back across the axis, scaled.
fn spread_axis(view: AxisView, reduced: &[f64], out: &mut [f64], scale: f64) {
    for o in 0..view.outer {
        for r in 0..view.inner {
            let v = reduced[o * view.inner + r] * scale;
            let base = o * view.axis_len * view.inner + r;
            for i in 0..view.axis_len {
                out[base + i * view.inner] += v;
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let a_il = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += a_il * b[l * n + j];
            }
        }
    }
    out
}

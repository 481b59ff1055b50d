//! Tape-based reverse-mode differentiation.
//!
//! A `Tape` records every operation of one forward pass into a flat list of
//! nodes and is rebuilt from scratch on the next pass. `backward` walks the
//! list in reverse, accumulating gradients for every node that is reachable
//! from a bound parameter or tracked input.
//!
//! Every op validates operand shapes and checks its output for NaN/Inf; a
//! non-finite value is an error, never silently propagated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(u32);

impl VarId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Mish,
    Silu,
    Softplus,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Unary(VarId, UnaryKind),
    Matmul(VarId, VarId),
    Conv1d {
        x: VarId,
        w: VarId,
        stride: usize,
        pad: usize,
    },
    Downsample {
        x: VarId,
        stride: usize,
    },
    UpsampleNearest {
        x: VarId,
        factor: usize,
    },
    GroupNorm {
        x: VarId,
        groups: usize,
        /// (mean, inv_std) per (batch, group), saved for backward.
        stats: Vec<(f64, f64)>,
    },
    Sum(VarId),
    Mean(VarId),
    SumAxis {
        x: VarId,
        axis: usize,
    },
    MaxAxis {
        x: VarId,
        /// Flat input index of the (first) max for each output element.
        argmax: Vec<usize>,
    },
    Slice {
        x: VarId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<VarId>,
        axis: usize,
    },
    Reshape(VarId),
    Broadcast(VarId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward pass. Create one per forward, drop it after backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (store index, tape var) for every parameter bound this pass.
    param_binds: Vec<(usize, VarId)>,
    grads: Vec<Option<Tensor>>,
}

/// Decompose a shape around `axis` into (pre, n, post) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let post: usize = shape[axis + 1..].iter().product();
    (pre, n, post)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    /// Gradient computed by the last `backward` call, if `v` was reachable.
    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<VarId> {
        value.check_finite(op_name(&op))?;
        let id = VarId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn req(&self, v: VarId) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    /// Record a value that does not need gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, false)
    }

    /// Record a gradient-tracked input (used by `grad_check`).
    pub fn input(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a store parameter onto the tape as a tracked leaf.
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> Result<VarId> {
        let v = self.push(store.value(idx).clone(), Op::Leaf, true)?;
        self.param_binds.push((idx, v));
        Ok(v)
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        let req = self.req(a) || self.req(b);
        self.push(value, Op::Add(a, b), req)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        let req = self.req(a) || self.req(b);
        self.push(value, Op::Sub(a, b), req)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_shape("mul", a, b)?;
        let value = self.value(a).mul(self.value(b))?;
        let req = self.req(a) || self.req(b);
        self.push(value, Op::Mul(a, b), req)
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).scale(-1.0);
        let req = self.req(a);
        self.push(value, Op::Neg(a), req)
    }

    pub fn scale(&mut self, a: VarId, k: f64) -> Result<VarId> {
        let value = self.value(a).scale(k);
        let req = self.req(a);
        self.push(value, Op::Scale(a, k), req)
    }

    pub fn add_scalar(&mut self, a: VarId, k: f64) -> Result<VarId> {
        let value = self.value(a).map(|v| v + k);
        let req = self.req(a);
        self.push(value, Op::AddScalar(a), req)
    }

    fn unary(&mut self, a: VarId, kind: UnaryKind) -> Result<VarId> {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Mish => math::mish,
            UnaryKind::Silu => math::silu,
            UnaryKind::Softplus => math::softplus,
            UnaryKind::Exp => math::exp,
            UnaryKind::Ln => math::ln,
            UnaryKind::Tanh => math::tanh,
            UnaryKind::Sigmoid => math::sigmoid,
        };
        let value = self.value(a).map(f);
        let req = self.req(a);
        self.push(value, Op::Unary(a, kind), req)
    }

    pub fn mish(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Mish)
    }

    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Silu)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Ln)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.unary(a, UnaryKind::Sigmoid)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        let req = self.req(a) || self.req(b);
        self.push(out, Op::Matmul(a, b), req)
    }

    /// 1D convolution: x `[B,Cin,L]`, w `[Cout,Cin,K]` -> `[B,Cout,Lout]`
    /// with `Lout = (L + 2*pad - K)/stride + 1`.
    pub fn conv1d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(CoreError::ShapeMismatch {
                op: "conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(CoreError::invalid("conv1d", "stride must be >= 1"));
        }
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if l + 2 * pad < k {
            return Err(CoreError::invalid(
                "conv1d",
                format!("kernel {k} larger than padded length {}", l + 2 * pad),
            ));
        }
        let lout = (l + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([b, cout, lout]);
        conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            out.data_mut(),
            b,
            cin,
            l,
            cout,
            k,
            stride,
            pad,
        );
        let req = self.req(x) || self.req(w);
        self.push(out, Op::Conv1d { x, w, stride, pad }, req)
    }

    /// Keep every `stride`-th element along the last axis.
    pub fn downsample1d(&mut self, x: VarId, stride: usize) -> Result<VarId> {
        if stride == 0 {
            return Err(CoreError::invalid("downsample1d", "stride must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or_else(|| {
            CoreError::invalid("downsample1d", "input must have at least one axis")
        })?;
        let lout = l.div_ceil(stride);
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = lout;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            for r in 0..rows {
                for i in 0..lout {
                    dst[r * lout + i] = src[r * l + i * stride];
                }
            }
        }
        let req = self.req(x);
        self.push(out, Op::Downsample { x, stride }, req)
    }

    /// Repeat each element `factor` times along the last axis.
    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 0 {
            return Err(CoreError::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or_else(|| {
            CoreError::invalid("upsample_nearest", "input must have at least one axis")
        })?;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = l * factor;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            for r in 0..rows {
                for i in 0..l * factor {
                    dst[r * l * factor + i] = src[r * l + i / factor];
                }
            }
        }
        let req = self.req(x);
        self.push(out, Op::UpsampleNearest { x, factor }, req)
    }

    /// Group normalization over `[B,C,L]` without affine terms; compose with
    /// broadcast mul/add for gamma and beta.
    pub fn group_norm(&mut self, x: VarId, groups: usize, eps: f64) -> Result<VarId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(CoreError::invalid(
                "group_norm",
                format!("expected [B,C,L], got {shape:?}"),
            ));
        }
        let (b, c, l) = (shape[0], shape[1], shape[2]);
        if groups == 0 || c % groups != 0 {
            return Err(CoreError::invalid(
                "group_norm",
                format!("groups {groups} must divide channels {c}"),
            ));
        }
        let cg = c / groups;
        let block = cg * l;
        let src = self.value(x).data();
        let mut out = Tensor::zeros(shape);
        let mut stats = Vec::with_capacity(b * groups);
        {
            let dst = out.data_mut();
            for bi in 0..b {
                for g in 0..groups {
                    let base = bi * c * l + g * block;
                    let slab = &src[base..base + block];
                    let mean = slab.iter().sum::<f64>() / block as f64;
                    let var =
                        slab.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
                    let inv_std = 1.0 / math::sqrt(var + eps);
                    stats.push((mean, inv_std));
                    for (d, &s) in dst[base..base + block].iter_mut().zip(slab) {
                        *d = (s - mean) * inv_std;
                    }
                }
            }
        }
        let req = self.req(x);
        self.push(out, Op::GroupNorm { x, groups, stats }, req)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let value = Tensor::scalar(self.value(a).sum());
        let req = self.req(a);
        self.push(value, Op::Sum(a), req)
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let value = Tensor::scalar(self.value(a).mean());
        let req = self.req(a);
        self.push(value, Op::Mean(a), req)
    }

    /// Sum along one axis (the axis is removed).
    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(CoreError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            for p in 0..pre {
                for i in 0..n {
                    let row = &src[(p * n + i) * post..(p * n + i + 1) * post];
                    for (d, &s) in dst[p * post..(p + 1) * post].iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
        }
        let req = self.req(a);
        self.push(out, Op::SumAxis { x: a, axis }, req)
    }

    /// Max along one axis (the axis is removed). Ties resolve to the first
    /// maximum in index order, which keeps the reduction deterministic.
    pub fn max_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(CoreError::invalid(
                "max_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (pre, n, post) = axis_split(&shape, axis);
        if n == 0 {
            return Err(CoreError::invalid("max_axis", "cannot reduce empty axis"));
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let src = self.value(a).data();
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0usize; pre * post];
        {
            let dst = out.data_mut();
            for p in 0..pre {
                for q in 0..post {
                    let mut best = src[p * n * post + q];
                    let mut best_idx = p * n * post + q;
                    for i in 1..n {
                        let idx = (p * n + i) * post + q;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    dst[p * post + q] = best;
                    argmax[p * post + q] = best_idx;
                }
            }
        }
        let req = self.req(a);
        self.push(out, Op::MaxAxis { x: a, argmax }, req)
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let value = self.value(a).reshape(shape)?;
        let req = self.req(a);
        self.push(value, Op::Reshape(a), req)
    }

    /// Slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, end: usize) -> Result<VarId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(CoreError::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            ));
        }
        let (pre, n, post) = axis_split(&shape, axis);
        let m = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = m;
        let src = self.value(a).data();
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            for p in 0..pre {
                for i in 0..m {
                    let s = (p * n + start + i) * post;
                    let d = (p * m + i) * post;
                    dst[d..d + post].copy_from_slice(&src[s..s + post]);
                }
            }
        }
        let req = self.req(a);
        self.push(out, Op::Slice { x: a, axis, start }, req)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::invalid("concat", "no parts"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(CoreError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (pre, _, post) = axis_split(&first, axis);
        let mut out = Tensor::zeros(out_shape);
        {
            let dst = out.data_mut();
            let mut offset = 0usize;
            for &part in parts {
                let n_i = self.shape(part)[axis];
                let src = self.value(part).data();
                for p in 0..pre {
                    let d = (p * total + offset) * post;
                    let s = p * n_i * post;
                    dst[d..d + n_i * post].copy_from_slice(&src[s..s + n_i * post]);
                }
                offset += n_i;
            }
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        )
    }

    /// Broadcast to `target` with NumPy right-alignment rules: the input
    /// shape is left-padded with 1s, then each axis must match or be 1.
    pub fn broadcast_to(&mut self, a: VarId, target: impl Into<Vec<usize>>) -> Result<VarId> {
        let target = target.into();
        let src_shape = self.shape(a).to_vec();
        if src_shape.len() > target.len() {
            return Err(CoreError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src_shape,
                rhs: target,
            });
        }
        let offset = target.len() - src_shape.len();
        for (i, &d) in src_shape.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return Err(CoreError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src_shape,
                    rhs: target,
                });
            }
        }
        let out = broadcast_forward(self.value(a), &target);
        let req = self.req(a);
        self.push(out, Op::Broadcast(a), req)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node. Clears any previous per-node
    /// gradients on this tape; accumulation across passes happens at the
    /// `Parameter` level via [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CoreError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.idx()] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: VarId, delta: Tensor) -> Result<()> {
        if !self.nodes[v.idx()].requires_grad {
            return Ok(());
        }
        match &mut self.grads[v.idx()] {
            Some(g) => *g = g.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&mut self, node_idx: usize, gout: &Tensor) -> Result<()> {
        let op = self.nodes[node_idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, gout.clone())?;
                self.add_grad(b, gout.clone())?;
            }
            Op::Sub(a, b) => {
                self.add_grad(a, gout.clone())?;
                self.add_grad(b, gout.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = gout.mul(self.value(b))?;
                let gb = gout.mul(self.value(a))?;
                self.add_grad(a, ga)?;
                self.add_grad(b, gb)?;
            }
            Op::Neg(a) => self.add_grad(a, gout.scale(-1.0))?,
            Op::Scale(a, k) => self.add_grad(a, gout.scale(k))?,
            Op::AddScalar(a) => self.add_grad(a, gout.clone())?,
            Op::Unary(a, kind) => {
                let x = self.value(a);
                let y = &self.nodes[node_idx].value;
                let deriv: Vec<f64> = match kind {
                    UnaryKind::Mish => x.data().iter().map(|&v| math::mish_deriv(v)).collect(),
                    UnaryKind::Silu => x.data().iter().map(|&v| math::silu_deriv(v)).collect(),
                    UnaryKind::Softplus => x.data().iter().map(|&v| math::sigmoid(v)).collect(),
                    UnaryKind::Exp => y.data().to_vec(),
                    UnaryKind::Ln => x.data().iter().map(|&v| 1.0 / v).collect(),
                    UnaryKind::Tanh => y.data().iter().map(|&v| 1.0 - v * v).collect(),
                    UnaryKind::Sigmoid => y.data().iter().map(|&v| v * (1.0 - v)).collect(),
                };
                let mut g = gout.clone();
                for (gi, d) in g.data_mut().iter_mut().zip(deriv) {
                    *gi *= d;
                }
                self.add_grad(a, g)?;
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = dC * B^T
                let mut ga = Tensor::zeros([m, k]);
                matmul_nt_into(gout.data(), self.value(b).data(), ga.data_mut(), m, n, k);
                // dB = A^T * dC
                let mut gb = Tensor::zeros([k, n]);
                matmul_tn_into(self.value(a).data(), gout.data(), gb.data_mut(), m, k, n);
                self.add_grad(a, ga)?;
                self.add_grad(b, gb)?;
            }
            Op::Conv1d { x, w, stride, pad } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (b, cin, l) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let mut gx = Tensor::zeros(sx.clone());
                let mut gw = Tensor::zeros(sw.clone());
                conv1d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    gout.data(),
                    gx.data_mut(),
                    gw.data_mut(),
                    b,
                    cin,
                    l,
                    cout,
                    k,
                    stride,
                    pad,
                );
                self.add_grad(x, gx)?;
                self.add_grad(w, gw)?;
            }
            Op::Downsample { x, stride } => {
                let shape = self.shape(x).to_vec();
                let l = *shape.last().unwrap();
                let lout = l.div_ceil(stride);
                let rows: usize = shape[..shape.len() - 1].iter().product();
                let mut gx = Tensor::zeros(shape);
                {
                    let dst = gx.data_mut();
                    for r in 0..rows {
                        for i in 0..lout {
                            dst[r * l + i * stride] = gout.data()[r * lout + i];
                        }
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::UpsampleNearest { x, factor } => {
                let shape = self.shape(x).to_vec();
                let l = *shape.last().unwrap();
                let rows: usize = shape[..shape.len() - 1].iter().product();
                let mut gx = Tensor::zeros(shape);
                {
                    let dst = gx.data_mut();
                    for r in 0..rows {
                        for i in 0..l * factor {
                            dst[r * l + i / factor] += gout.data()[r * l * factor + i];
                        }
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::GroupNorm { x, groups, stats } => {
                let shape = self.shape(x).to_vec();
                let (b, c, l) = (shape[0], shape[1], shape[2]);
                let cg = c / groups;
                let block = cg * l;
                let src = self.value(x).data();
                let mut gx = Tensor::zeros(shape.clone());
                {
                    let dst = gx.data_mut();
                    for bi in 0..b {
                        for g in 0..groups {
                            let base = bi * c * l + g * block;
                            let (mean, inv_std) = stats[bi * groups + g];
                            let xs = &src[base..base + block];
                            let gs = &gout.data()[base..base + block];
                            let nf = block as f64;
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for (&xv, &gv) in xs.iter().zip(gs) {
                                let xh = (xv - mean) * inv_std;
                                sum_g += gv;
                                sum_gx += gv * xh;
                            }
                            for ((d, &xv), &gv) in
                                dst[base..base + block].iter_mut().zip(xs).zip(gs)
                            {
                                let xh = (xv - mean) * inv_std;
                                *d = inv_std * (gv - sum_g / nf - xh * sum_gx / nf);
                            }
                        }
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.shape(a).to_vec(), gout.item());
                self.add_grad(a, g)?;
            }
            Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                let g = Tensor::full(self.shape(a).to_vec(), gout.item() / n);
                self.add_grad(a, g)?;
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(x).to_vec();
                let (pre, n, post) = axis_split(&shape, axis);
                let mut gx = Tensor::zeros(shape);
                {
                    let dst = gx.data_mut();
                    for p in 0..pre {
                        for i in 0..n {
                            let d = (p * n + i) * post;
                            dst[d..d + post].copy_from_slice(&gout.data()[p * post..(p + 1) * post]);
                        }
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(x).to_vec());
                {
                    let dst = gx.data_mut();
                    for (out_idx, &in_idx) in argmax.iter().enumerate() {
                        dst[in_idx] += gout.data()[out_idx];
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(x).to_vec();
                let (pre, n, post) = axis_split(&shape, axis);
                let m = gout.shape()[axis];
                let mut gx = Tensor::zeros(shape);
                {
                    let dst = gx.data_mut();
                    for p in 0..pre {
                        for i in 0..m {
                            let d = (p * n + start + i) * post;
                            let s = (p * m + i) * post;
                            dst[d..d + post].copy_from_slice(&gout.data()[s..s + post]);
                        }
                    }
                }
                self.add_grad(x, gx)?;
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[node_idx].value.shape().to_vec();
                let (pre, total, post) = axis_split(&out_shape, axis);
                let mut offset = 0usize;
                for part in parts {
                    let n_i = self.shape(part)[axis];
                    let mut gp = Tensor::zeros(self.shape(part).to_vec());
                    {
                        let dst = gp.data_mut();
                        for p in 0..pre {
                            let s = (p * total + offset) * post;
                            let d = p * n_i * post;
                            dst[d..d + n_i * post]
                                .copy_from_slice(&gout.data()[s..s + n_i * post]);
                        }
                    }
                    self.add_grad(part, gp)?;
                    offset += n_i;
                }
            }
            Op::Reshape(a) => {
                let g = gout.reshape(self.shape(a).to_vec())?;
                self.add_grad(a, g)?;
            }
            Op::Broadcast(a) => {
                let g = broadcast_backward(gout, self.shape(a));
                self.add_grad(a, g)?;
            }
        }
        Ok(())
    }

    /// Add the gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(idx, v) in &self.param_binds {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(idx, g)?;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Unary(_, UnaryKind::Mish) => "mish",
        Op::Unary(_, UnaryKind::Silu) => "silu",
        Op::Unary(_, UnaryKind::Softplus) => "softplus",
        Op::Unary(_, UnaryKind::Exp) => "exp",
        Op::Unary(_, UnaryKind::Ln) => "ln",
        Op::Unary(_, UnaryKind::Tanh) => "tanh",
        Op::Unary(_, UnaryKind::Sigmoid) => "sigmoid",
        Op::Matmul(..) => "matmul",
        Op::Conv1d { .. } => "conv1d",
        Op::Downsample { .. } => "downsample1d",
        Op::UpsampleNearest { .. } => "upsample_nearest",
        Op::GroupNorm { .. } => "group_norm",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::MaxAxis { .. } => "max_axis",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Reshape(..) => "reshape",
        Op::Broadcast(..) => "broadcast_to",
    }
}

// ── Kernels ─────────────────────────────────────────────────────────────

/// C += A[m,k] * B[k,n], ikj order so the inner loop runs over contiguous rows.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A[m,n] * B[k,n]^T -> [m,k]  (i.e. C = A * B^T).
fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * k + j] += acc;
        }
    }
}

/// C += A[m,k]^T * B[m,n] -> [k,n].
fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    b: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let lout = (l + 2 * pad - k) / stride + 1;
    for bi in 0..b {
        for co in 0..cout {
            let orow = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            for ci in 0..cin {
                let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    // out[lo] += x[lo*stride + kk - pad] * wv for valid positions
                    for (lo, ov) in orow.iter_mut().enumerate() {
                        let xi = lo * stride + kk;
                        if xi >= pad && xi - pad < l {
                            *ov += xrow[xi - pad] * wv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    b: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let lout = (l + 2 * pad - k) / stride + 1;
    for bi in 0..b {
        for co in 0..cout {
            let grow = &gout[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            for ci in 0..cin {
                let xrow = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                let gxrow = &mut gx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                let gwrow = &mut gw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                for kk in 0..k {
                    let wv = wrow[kk];
                    let mut gw_acc = 0.0;
                    for (lo, &gv) in grow.iter().enumerate() {
                        let xi = lo * stride + kk;
                        if xi >= pad && xi - pad < l {
                            gx_add(gxrow, xi - pad, gv * wv);
                            gw_acc += gv * xrow[xi - pad];
                        }
                    }
                    gwrow[kk] += gw_acc;
                }
            }
        }
    }
}

#[inline]
fn gx_add(gx: &mut [f64], i: usize, v: f64) {
    gx[i] += v;
}

fn broadcast_forward(src: &Tensor, target: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(target.to_vec());
    let src_shape = src.shape();
    let offset = target.len() - src_shape.len();
    // Per-output-axis source stride; 0 where the source axis is broadcast.
    let mut src_strides = vec![0usize; target.len()];
    {
        let mut stride = 1usize;
        for i in (0..src_shape.len()).rev() {
            if src_shape[i] != 1 {
                src_strides[offset + i] = stride;
            }
            stride *= src_shape[i];
        }
    }
    let mut idx = vec![0usize; target.len()];
    let data = src.data();
    for o in out.data_mut().iter_mut() {
        let mut s = 0usize;
        for (d, &st) in idx.iter().zip(&src_strides) {
            s += d * st;
        }
        *o = data[s];
        // odometer increment
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_backward(gout: &Tensor, src_shape: &[usize]) -> Tensor {
    let target = gout.shape();
    let offset = target.len() - src_shape.len();
    let mut src_strides = vec![0usize; target.len()];
    {
        let mut stride = 1usize;
        for i in (0..src_shape.len()).rev() {
            if src_shape[i] != 1 {
                src_strides[offset + i] = stride;
            }
            stride *= src_shape[i];
        }
    }
    let mut gx = Tensor::zeros(src_shape.to_vec());
    let mut idx = vec![0usize; target.len()];
    let dst = gx.data_mut();
    for &g in gout.data() {
        let mut s = 0usize;
        for (d, &st) in idx.iter().zip(&src_strides) {
            s += d * st;
        }
        dst[s] += g;
        for ax in (0..target.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < target[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    gx
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Maximum relative error between the tape gradient and central finite
/// differences for a scalar function of one tensor input.
///
/// The error per coordinate is `|g_tape − g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoreError::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let xv = tape.input(x.clone())?;
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(CoreError::invalid("grad_check", "f must return a scalar"));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |x_pert: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(x_pert.clone())?;
        let l = f(&mut t, v)?;
        let val = t.value(l).item();
        if !val.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };

    let mut max_err = 0.0f64;
    let mut pert = x.clone();
    for i in 0..x.numel() {
        let orig = pert.data()[i];
        pert.data_mut()[i] = orig + eps;
        let fp = eval(&pert)?;
        pert.data_mut()[i] = orig - eps;
        let fm = eval(&pert)?;
        pert.data_mut()[i] = orig;
        let g_fd = (fp - fm) / (2.0 * eps);
        let g_an = analytic.data()[i];
        let err = math::abs(g_an - g_fd) / math::max(1.0, math::abs(g_fd));
        max_err = math::max(max_err, err);
    }
    Ok(max_err)
}

/// Gradient check over every parameter in `store`. `f` runs a forward pass
/// against the given store and returns the scalar loss node plus the tape it
/// was recorded on.
pub fn grad_check_store<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Tape, VarId)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(CoreError::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    {
        let (mut tape, loss) = f(&analytic_store)?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut analytic_store)?;
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let (tape, loss) = f(s)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(CoreError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work = store.clone();
    let mut max_err = 0.0f64;
    for idx in 0..store.len() {
        for i in 0..store.value(idx).numel() {
            let orig = store.value(idx).data()[i];
            work.value_mut(idx).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.value_mut(idx).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.value_mut(idx).data_mut()[i] = orig;
            let g_fd = (fp - fm) / (2.0 * eps);
            let g_an = analytic_store
                .get(idx)
                .grad
                .as_ref()
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            let err = math::abs(g_an - g_fd) / math::max(1.0, math::abs(g_fd));
            max_err = math::max(max_err, err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::eye(3)).unwrap();
        let x = tape
            .constant(Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let y = tape.matmul(i3, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new([1, 1, 5], vec![1., 2., 3., 4., 5.]).unwrap())
            .unwrap();
        let w = tape.constant(Tensor::new([1, 1, 1], vec![1.0]).unwrap()).unwrap();
        let y = tape.conv1d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn softplus_of_zero_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!((tape.value(y).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([3, 3])).unwrap();
        match tape.add(a, b).unwrap_err() {
            CoreError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::new([2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let sq = tape.mul(wv, wv).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[2.0, 4.0]);

        // repeated backward+accumulate without zeroing accumulates
        let mut tape2 = Tape::new();
        let wv2 = tape2.param(&store, w).unwrap();
        let sq2 = tape2.mul(wv2, wv2).unwrap();
        let loss2 = tape2.sum(sq2).unwrap();
        tape2.backward(loss2).unwrap();
        tape2.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn loss_independent_of_param_gives_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros([3])).unwrap();
        let mut tape = Tape::new();
        let _wv = tape.param(&store, w).unwrap();
        let c = tape.constant(Tensor::scalar(5.0)).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn nan_surfaces_as_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1], vec![-1.0]).unwrap()).unwrap();
        assert!(matches!(
            tape.ln(x).unwrap_err(),
            CoreError::NonFinite { op: "ln" }
        ));
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_constant_function_is_zero() {
        let x = Tensor::new([3], vec![0.3, -0.7, 1.1]).unwrap();
        let err = grad_check(
            |t, _v| {
                let c = t.constant(Tensor::scalar(2.5))?;
                t.sum(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every differentiable op passes a finite-difference check on random
    /// small inputs.
    #[test]
    fn grad_check_each_op() {
        let mut rng = Rng::from_seed(99);
        let x_vec = Tensor::randn([6], &mut rng);
        let x_mat = Tensor::randn([2, 3], &mut rng);
        let x_map = Tensor::randn([2, 4, 6], &mut rng);
        let tol = 1e-4;

        let cases: Vec<(&str, &Tensor, fn(&mut Tape, VarId) -> Result<VarId>)> = vec![
            ("add", &x_vec, |t, v| {
                let w = t.scale(v, 2.0)?;
                let s = t.add(v, w)?;
                let sq = t.mul(s, s)?;
                t.sum(sq)
            }),
            ("sub_neg", &x_vec, |t, v| {
                let n = t.neg(v)?;
                let s = t.sub(v, n)?;
                let sq = t.mul(s, s)?;
                t.mean(sq)
            }),
            ("mish", &x_vec, |t, v| {
                let y = t.mish(v)?;
                t.sum(y)
            }),
            ("silu", &x_vec, |t, v| {
                let y = t.silu(v)?;
                t.sum(y)
            }),
            ("softplus_ln", &x_vec, |t, v| {
                let sp = t.softplus(v)?;
                let ln = t.ln(sp)?;
                t.sum(ln)
            }),
            ("exp", &x_vec, |t, v| {
                let y = t.exp(v)?;
                t.sum(y)
            }),
            ("tanh_sigmoid", &x_vec, |t, v| {
                let a = t.tanh(v)?;
                let b = t.sigmoid(v)?;
                let p = t.mul(a, b)?;
                t.sum(p)
            }),
            ("matmul", &x_mat, |t, v| {
                let w = t.constant(Tensor::new([3, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap())?;
                let y = t.matmul(v, w)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("conv1d", &x_map, |t, v| {
                let w = t.constant(Tensor::new(
                    [3, 4, 3],
                    (0..36).map(|i| 0.1 * (i as f64) - 1.7).collect(),
                )
                .unwrap())?;
                let y = t.conv1d(v, w, 2, 1)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("downsample", &x_map, |t, v| {
                let y = t.downsample1d(v, 2)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("upsample", &x_map, |t, v| {
                let y = t.upsample_nearest(v, 2)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("group_norm", &x_map, |t, v| {
                let y = t.group_norm(v, 2, 1e-5)?;
                let w = t.constant(Tensor::new(
                    [2, 4, 6],
                    (0..48).map(|i| (i as f64 * 0.37).sin()).collect(),
                )
                .unwrap())?;
                let p = t.mul(y, w)?;
                t.sum(p)
            }),
            ("sum_axis", &x_map, |t, v| {
                let y = t.sum_axis(v, 1)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("max_axis", &x_map, |t, v| {
                let y = t.max_axis(v, 2)?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            }),
            ("slice_concat", &x_map, |t, v| {
                let a = t.slice(v, 2, 0, 3)?;
                let b = t.slice(v, 2, 3, 6)?;
                let c = t.concat(&[b, a], 2)?;
                let sq = t.mul(c, c)?;
                t.sum(sq)
            }),
            ("broadcast", &x_vec, |t, v| {
                let r = t.reshape(v, [6, 1])?;
                let b = t.broadcast_to(r, [2, 6, 5])?;
                let sq = t.mul(b, b)?;
                t.sum(sq)
            }),
        ];

        for (name, x, f) in cases {
            let err = grad_check(f, x, 1e-5).unwrap();
            assert!(err <= tol, "{name}: grad error {err}");
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = Rng::from_seed(3);
        let x = Tensor::randn([2, 8, 5], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let y = tape.group_norm(xv, 4, 1e-8).unwrap();
        let v = tape.value(y);
        // each (batch, group) block has mean ~0 and var ~1
        for b in 0..2 {
            for g in 0..4 {
                let base = b * 40 + g * 10;
                let blk = &v.data()[base..base + 10];
                let mean: f64 = blk.iter().sum::<f64>() / 10.0;
                let var: f64 = blk.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 10.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip_on_values() {
        let mut rng = Rng::from_seed(8);
        let x = Tensor::randn([2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let a = tape.slice(xv, 1, 0, 1).unwrap();
        let b = tape.slice(xv, 1, 1, 3).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), x.data());
    }

    #[test]
    fn downsample_then_upsample_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 8])).unwrap();
        let d = tape.downsample1d(x, 2).unwrap();
        assert_eq!(tape.shape(d), &[1, 2, 4]);
        let u = tape.upsample_nearest(d, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 8]);
    }
}

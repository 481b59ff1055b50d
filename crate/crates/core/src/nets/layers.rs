//! Layer building blocks: linear, 1D conv, group norm with affine terms, and
//! the conditional residual block with feature-wise modulation.
//!
//! Layers hold parameter indices into a [`ParamStore`]; construction draws
//! initial values from a deterministic stream in declaration order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Fully connected layer `[N, in] -> [N, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(&[in_dim, out_dim], in_dim, rng),
        )?;
        let b = store.add(
            format!("{name}.bias"),
            uniform_init(&[out_dim], in_dim, rng),
        )?;
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// Zero weights and a constant bias; used for heads that must start as
    /// an exact identity or a fixed offset.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_value: f64,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]))?;
        let b = store.add(
            format!("{name}.bias"),
            Tensor::full([out_dim], bias_value),
        )?;
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.matmul(x, w)?;
        let bb = tape.broadcast_to(b, tape.shape(y).to_vec())?;
        tape.add(y, bb)
    }
}

/// 1D convolution layer over `[B, C, L]` maps.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    w: usize,
    b: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = cin * kernel;
        let w = store.add(
            format!("{name}.weight"),
            uniform_init(&[cout, cin, kernel], fan_in, rng),
        )?;
        let b = store.add(format!("{name}.bias"), uniform_init(&[cout], fan_in, rng))?;
        Ok(Conv1dLayer {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
        })
    }

    /// Zero weights, fixed bias; see [`Linear::new_zeroed`].
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias_value: f64,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.weight"),
            Tensor::zeros([cout, cin, kernel]),
        )?;
        let b = store.add(format!("{name}.bias"), Tensor::full([cout], bias_value))?;
        Ok(Conv1dLayer {
            w,
            b,
            cin,
            cout,
            kernel,
            stride: 1,
            pad: 0,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let y = tape.conv1d(x, w, self.stride, self.pad)?;
        let bcol = tape.reshape(b, [self.cout, 1])?;
        let bb = tape.broadcast_to(bcol, tape.shape(y).to_vec())?;
        tape.add(y, bb)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    gamma: usize,
    beta: usize,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNormLayer {
    /// `groups` is reduced to `gcd(groups, channels)` so small widths stay
    /// valid under one config default.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        let groups = gcd(groups, channels);
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]))?;
        Ok(GroupNormLayer {
            gamma,
            beta,
            channels,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> Result<VarId> {
        let normed = tape.group_norm(x, self.groups, 1e-5)?;
        let target = tape.shape(normed).to_vec();
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        let gc = tape.reshape(g, [self.channels, 1])?;
        let bc = tape.reshape(b, [self.channels, 1])?;
        let gb = tape.broadcast_to(gc, target.clone())?;
        let bb = tape.broadcast_to(bc, target)?;
        let scaled = tape.mul(normed, gb)?;
        tape.add(scaled, bb)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Feature-wise affine modulation `y = (1 + scale) * x + shift`.
///
/// `x` is `[B, C, L]`; `scale` and `shift` are `[B, C]`, broadcast over the
/// temporal axis. Identity when scale and shift are zero.
pub fn film(tape: &mut Tape, x: VarId, scale: VarId, shift: VarId) -> Result<VarId> {
    let xs = tape.shape(x).to_vec();
    let ss = tape.shape(scale).to_vec();
    if xs.len() != 3 || ss.len() != 2 || ss[1] != xs[1] || tape.shape(shift) != ss.as_slice() {
        return Err(CoreError::ShapeMismatch {
            op: "film",
            lhs: xs,
            rhs: ss,
        });
    }
    let b = xs[0];
    let c = xs[1];
    let one_plus = tape.add_scalar(scale, 1.0)?;
    let sc = tape.reshape(one_plus, [b, c, 1])?;
    let sh = tape.reshape(shift, [b, c, 1])?;
    let scb = tape.broadcast_to(sc, xs.clone())?;
    let shb = tape.broadcast_to(sh, xs)?;
    let y = tape.mul(x, scb)?;
    tape.add(y, shb)
}

/// Conv -> group norm -> mish, modulated between the two convs by a
/// feature-wise affine computed from the conditioning vector, with a residual
/// path (1x1 conv when the channel count changes).
#[derive(Debug, Clone)]
pub struct ConditionalResBlock {
    conv1: Conv1dLayer,
    gn1: GroupNormLayer,
    cond: Linear,
    conv2: Conv1dLayer,
    gn2: GroupNormLayer,
    res: Option<Conv1dLayer>,
    pub cout: usize,
}

impl ConditionalResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        cond_dim: usize,
        kernel: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let pad = kernel / 2;
        let conv1 = Conv1dLayer::new(
            store,
            &format!("{name}.conv1"),
            cin,
            cout,
            kernel,
            1,
            pad,
            rng,
        )?;
        let gn1 = GroupNormLayer::new(store, &format!("{name}.gn1"), cout, groups)?;
        let cond = Linear::new(store, &format!("{name}.cond"), cond_dim, 2 * cout, rng)?;
        let conv2 = Conv1dLayer::new(
            store,
            &format!("{name}.conv2"),
            cout,
            cout,
            kernel,
            1,
            pad,
            rng,
        )?;
        let gn2 = GroupNormLayer::new(store, &format!("{name}.gn2"), cout, groups)?;
        let res = if cin != cout {
            Some(Conv1dLayer::new(
                store,
                &format!("{name}.res"),
                cin,
                cout,
                1,
                1,
                0,
                rng,
            )?)
        } else {
            None
        };
        Ok(ConditionalResBlock {
            conv1,
            gn1,
            cond,
            conv2,
            gn2,
            res,
            cout,
        })
    }

    /// `x: [B, cin, L]`, `cond: [B, cond_dim]` -> `[B, cout, L]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        cond: VarId,
    ) -> Result<VarId> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.gn1.forward(tape, store, h)?;
        let h = tape.mish(h)?;

        let ca = tape.mish(cond)?;
        let ca = self.cond.forward(tape, store, ca)?;
        let scale = tape.slice(ca, 1, 0, self.cout)?;
        let shift = tape.slice(ca, 1, self.cout, 2 * self.cout)?;
        let h = film(tape, h, scale, shift)?;

        let h = self.conv2.forward(tape, store, h)?;
        let h = self.gn2.forward(tape, store, h)?;
        let h = tape.mish(h)?;

        let res = match &self.res {
            Some(r) => r.forward(tape, store, x)?,
            None => x,
        };
        tape.add(h, res)
    }
}

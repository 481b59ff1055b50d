//! Three-stage conditional 1D temporal U-Net.
//!
//! The down path halves the temporal axis after stages 0 and 1; stage 2 keeps
//! it, so a horizon of 16 bottlenecks at length 4. Two lateral features are
//! exposed: the outputs of stages 0 (shallow, idx 1) and 1 (deep, idx 0),
//! consumed by the mirrored up stages. The stage-2 output is the backbone
//! feature handed to the bottleneck stage before upsampling begins.
//!
//! Every residual block is modulated by a feature-wise affine computed from
//! the concatenation of the processed timestep embedding and the observation
//! condition.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::{
    timestep_embedding, ConditionalResBlock, Conv1dLayer, GroupNormLayer, Linear, ModelConfig,
};

/// Captured intermediate features of one forward pass.
#[derive(Debug, Clone)]
pub struct UNetTaps {
    /// `[B, C_b, L_b]` output of the final down stage.
    pub backbone: Tensor,
    /// Lateral features; `skips[0]` is the deep one, `skips[1]` the shallow.
    pub skips: [Tensor; 2],
}

struct DownStage {
    block1: ConditionalResBlock,
    block2: ConditionalResBlock,
    pool: Option<Conv1dLayer>,
}

struct UpStage {
    block1: ConditionalResBlock,
    block2: ConditionalResBlock,
}

pub struct UNet {
    tmlp1: Linear,
    tmlp2: Linear,
    down: Vec<DownStage>,
    up: Vec<UpStage>,
    final_conv: Conv1dLayer,
    final_gn: GroupNormLayer,
    final_proj: Conv1dLayer,
    pub t_emb_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    cond_total: usize,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.t_emb_dim;
        let tmlp1 = Linear::new(store, &format!("{name}.tmlp.fc1"), e, 4 * e, rng)?;
        let tmlp2 = Linear::new(store, &format!("{name}.tmlp.fc2"), 4 * e, e, rng)?;

        let cond_total = e + cfg.cond_total();
        let [d0, d1, d2] = cfg.down_dims;
        let k = cfg.kernel;
        let g = cfg.n_groups;
        let pad = k / 2;

        let mut down = Vec::new();
        let widths = [(cfg.action_dim, d0), (d0, d1), (d1, d2)];
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            let block1 = ConditionalResBlock::new(
                store,
                &format!("{name}.down.{i}.block1"),
                cin,
                cout,
                cond_total,
                k,
                g,
                rng,
            )?;
            let block2 = ConditionalResBlock::new(
                store,
                &format!("{name}.down.{i}.block2"),
                cout,
                cout,
                cond_total,
                k,
                g,
                rng,
            )?;
            let pool = if i < 2 {
                Some(Conv1dLayer::new(
                    store,
                    &format!("{name}.down.{i}.pool"),
                    cout,
                    cout,
                    k,
                    2,
                    pad,
                    rng,
                )?)
            } else {
                None
            };
            down.push(DownStage {
                block1,
                block2,
                pool,
            });
        }

        let mut up = Vec::new();
        for (i, &(cin, cout)) in [(d2 + d1, d1), (d1 + d0, d0)].iter().enumerate() {
            let block1 = ConditionalResBlock::new(
                store,
                &format!("{name}.up.{i}.block1"),
                cin,
                cout,
                cond_total,
                k,
                g,
                rng,
            )?;
            let block2 = ConditionalResBlock::new(
                store,
                &format!("{name}.up.{i}.block2"),
                cout,
                cout,
                cond_total,
                k,
                g,
                rng,
            )?;
            up.push(UpStage { block1, block2 });
        }

        let final_conv = Conv1dLayer::new(store, &format!("{name}.final.conv"), d0, d0, k, 1, pad, rng)?;
        let final_gn = GroupNormLayer::new(store, &format!("{name}.final.gn"), d0, g)?;
        let final_proj =
            Conv1dLayer::new(store, &format!("{name}.final.proj"), d0, cfg.action_dim, 1, 1, 0, rng)?;

        Ok(UNet {
            tmlp1,
            tmlp2,
            down,
            up,
            final_conv,
            final_gn,
            final_proj,
            t_emb_dim: e,
            action_dim: cfg.action_dim,
            horizon: cfg.horizon,
            cond_total,
        })
    }

    /// Build the per-block conditioning `[B, t_emb_dim + cond_total]` from
    /// per-row timesteps and the observation condition.
    pub fn film_condition(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: &[usize],
        cond: VarId,
    ) -> Result<VarId> {
        let b = t.len();
        let cs = tape.shape(cond).to_vec();
        if cs.len() != 2 || cs[0] != b {
            return Err(CoreError::invalid(
                "unet_forward",
                format!("condition shape {cs:?} does not match batch {b}"),
            ));
        }
        let mut emb = Tensor::zeros([b, self.t_emb_dim]);
        for (i, &ti) in t.iter().enumerate() {
            let e = timestep_embedding(ti, self.t_emb_dim);
            emb.data_mut()[i * self.t_emb_dim..(i + 1) * self.t_emb_dim].copy_from_slice(e.data());
        }
        let ev = tape.constant(emb)?;
        let h = self.tmlp1.forward(tape, store, ev)?;
        let h = tape.mish(h)?;
        let tfeat = self.tmlp2.forward(tape, store, h)?;
        tape.concat(&[tfeat, cond], 1)
    }

    /// Down path: `[B, action_dim, H]` -> backbone `[B, d2, H/4]` plus the
    /// two lateral features `[deep, shallow]`.
    pub fn down_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_t: VarId,
        film_cond: VarId,
    ) -> Result<(VarId, [VarId; 2])> {
        let shape = tape.shape(a_t).to_vec();
        if shape.len() != 3 || shape[1] != self.action_dim || shape[2] != self.horizon {
            return Err(CoreError::invalid(
                "unet_forward",
                format!(
                    "expected [B, {}, {}] input, got {shape:?}",
                    self.action_dim, self.horizon
                ),
            ));
        }
        let mut x = a_t;
        let mut laterals = Vec::new();
        for stage in &self.down {
            x = stage.block1.forward(tape, store, x, film_cond)?;
            x = stage.block2.forward(tape, store, x, film_cond)?;
            if let Some(pool) = &stage.pool {
                laterals.push(x);
                x = pool.forward(tape, store, x)?;
            }
        }
        // laterals were pushed shallow-first
        Ok((x, [laterals[1], laterals[0]]))
    }

    /// Up path: consume the (possibly filtered/masked) backbone feature and
    /// lateral features, produce `[B, action_dim, H]`.
    pub fn up_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: VarId,
        skips: [VarId; 2],
        film_cond: VarId,
    ) -> Result<VarId> {
        let mut x = z;
        for (stage, &skip) in self.up.iter().zip(skips.iter()) {
            x = tape.upsample_nearest(x, 2)?;
            x = tape.concat(&[x, skip], 1)?;
            x = stage.block1.forward(tape, store, x, film_cond)?;
            x = stage.block2.forward(tape, store, x, film_cond)?;
        }
        let x = self.final_conv.forward(tape, store, x)?;
        let x = self.final_gn.forward(tape, store, x)?;
        let x = tape.mish(x)?;
        self.final_proj.forward(tape, store, x)
    }
}

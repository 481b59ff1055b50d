//! Observation encoder and the conditional 1D temporal U-Net.

mod encoder;
mod layers;
mod policy;
mod unet;

pub use encoder::Encoder;
pub use layers::{film, ConditionalResBlock, Conv1dLayer, GroupNormLayer, Linear};
pub use policy::{sample_trajectory, ForwardHooks, PolicyModel, PolicyOut, PolicySampler};
pub use unet::{UNet, UNetTaps};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

/// One observation frame: a point set and a proprioceptive state vector.
#[derive(Debug, Clone)]
pub struct Observation {
    /// `[K, point_dim]` workspace points.
    pub points: Tensor,
    /// `[proprio_dim]` state vector.
    pub proprio: Tensor,
}

/// A window of the most recent `n_obs` observation frames.
pub type ObsWindow = Vec<Observation>;

/// Compact conditioning vector: the per-frame encoder outputs concatenated
/// across the observation window.
#[derive(Debug, Clone)]
pub struct ConditionVector(pub Tensor);

/// An H-step action trajectory stored as `[H, action_dim]`.
#[derive(Debug, Clone)]
pub struct ActionTrajectory {
    pub actions: Tensor,
    /// True while values live in the normalized [-1, 1] action space.
    pub normalized: bool,
}

/// Full shape configuration of the policy network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub action_dim: usize,
    pub horizon: usize,
    pub n_obs: usize,
    pub k_points: usize,
    pub point_dim: usize,
    pub proprio_dim: usize,
    /// Per-frame encoder output width; the condition fed to the U-Net is
    /// `n_obs * cond_dim` wide.
    pub cond_dim: usize,
    pub enc_hidden: usize,
    /// Channel widths of the three down stages; temporal length halves after
    /// stages 0 and 1 only, so the bottleneck runs at `horizon / 4`.
    pub down_dims: [usize; 3],
    pub kernel: usize,
    pub n_groups: usize,
    pub t_emb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            action_dim: 2,
            horizon: 16,
            n_obs: 2,
            k_points: 32,
            point_dim: 2,
            proprio_dim: 4,
            cond_dim: 64,
            enc_hidden: 64,
            down_dims: [32, 64, 128],
            kernel: 3,
            n_groups: 8,
            t_emb_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 4 || self.horizon % 4 != 0 {
            return Err(CoreError::invalid(
                "model_config",
                format!("horizon {} must be a positive multiple of 4", self.horizon),
            ));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(CoreError::invalid("model_config", "kernel must be odd"));
        }
        if self.t_emb_dim % 2 != 0 || self.t_emb_dim < 2 {
            return Err(CoreError::invalid(
                "model_config",
                "timestep embedding dim must be even and >= 2",
            ));
        }
        for v in [
            self.action_dim,
            self.n_obs,
            self.k_points,
            self.point_dim,
            self.proprio_dim,
            self.cond_dim,
            self.enc_hidden,
            self.n_groups,
        ] {
            if v == 0 {
                return Err(CoreError::invalid("model_config", "zero-sized dimension"));
            }
        }
        if self.down_dims.iter().any(|&d| d == 0) {
            return Err(CoreError::invalid("model_config", "zero down width"));
        }
        Ok(())
    }

    /// Width of the condition vector consumed by the U-Net blocks.
    pub fn cond_total(&self) -> usize {
        self.n_obs * self.cond_dim
    }

    /// Temporal length at the bottleneck.
    pub fn bottleneck_len(&self) -> usize {
        self.horizon / 4
    }
}

/// Sinusoidal embedding of a (1-based) timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros([dim]);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = math::exp(-math::ln(10_000.0) * exponent);
        let angle = t as f64 * freq;
        out.data_mut()[i] = math::sin(angle);
        out.data_mut()[half + i] = math::cos(angle);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().cond_total(), 128);
        assert_eq!(ModelConfig::default().bottleneck_len(), 4);
    }

    #[test]
    fn bad_horizon_rejected() {
        let cfg = ModelConfig {
            horizon: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embedding_distinguishes_timesteps() {
        let a = timestep_embedding(1, 32);
        let b = timestep_embedding(99, 32);
        assert_ne!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}

//! The full policy: observation encoder, conditional U-Net, and the optional
//! variational bottleneck over the backbone feature, wired for training,
//! sampling, and the masking diagnostics.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::schedule::{ddim_sample, DenoiseModel, NoiseSchedule, SamplerConfig};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::vr::{VrConfig, VrHeads, VrMode};

use super::{ActionTrajectory, Encoder, ModelConfig, ObsWindow, UNet, UNetTaps};

/// Test-time interventions on the intermediate features.
///
/// Replacements happen right where the feature is produced; additive noise,
/// the bottleneck, and multiplicative masks are applied, in that order, to
/// what the up path will consume. Mask and noise tensors are `[C, L]` maps
/// broadcast across the batch.
#[derive(Default, Clone)]
pub struct ForwardHooks {
    pub replace_backbone: Option<Tensor>,
    pub replace_skip: [Option<Tensor>; 2],
    pub backbone_noise: Option<Tensor>,
    pub mask_backbone: Option<Tensor>,
    pub mask_skip: [Option<Tensor>; 2],
    pub capture_taps: bool,
}

/// Tape-level outputs of a policy forward pass.
pub struct PolicyOut {
    /// `[B, action_dim, H]` clean-sample prediction.
    pub a0_hat: VarId,
    /// KL summed per batch row; present when the bottleneck ran.
    pub kl_per_sample: Option<VarId>,
    pub taps: Option<UNetTaps>,
}

/// Parameter record plus the layer wiring for the full policy.
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub vr_cfg: VrConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub unet: UNet,
    pub vr: Option<VrHeads>,
}

impl PolicyModel {
    /// Deterministic construction: all initial values derive from `seed`.
    pub fn new(cfg: ModelConfig, vr_cfg: VrConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        vr_cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, "param-init", 0);
        let encoder = Encoder::new(&mut store, "enc", &cfg, &mut rng)?;
        let unet = UNet::new(&mut store, "unet", &cfg, &mut rng)?;
        let vr = if vr_cfg.enabled {
            Some(VrHeads::new(
                &mut store,
                "vr",
                cfg.down_dims[2],
                cfg.t_emb_dim,
                &vr_cfg,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(PolicyModel {
            cfg,
            vr_cfg,
            store,
            encoder,
            unet,
            vr,
        })
    }

    /// The mode the bottleneck runs in while sampling actions.
    pub fn inference_vr_mode(&self) -> VrMode {
        if self.vr.is_some() {
            self.vr_cfg.inference_mode
        } else {
            VrMode::Bypass
        }
    }

    /// Number of parameter values in the bottleneck heads.
    pub fn vr_param_values(&self) -> usize {
        self.store.values_with_prefix("vr.")
    }

    /// Full forward pass against an explicit parameter store (usually
    /// `&self.store`; gradient checks substitute perturbed clones).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a_t: VarId,
        t: &[usize],
        cond: VarId,
        vr_mode: VrMode,
        vr_rng: Option<&mut Rng>,
        hooks: &ForwardHooks,
    ) -> Result<PolicyOut> {
        let batch = tape.shape(a_t)[0];
        if t.len() != batch {
            return Err(CoreError::invalid(
                "policy_forward",
                "one timestep per batch row required",
            ));
        }
        let film_cond = self.unet.film_condition(tape, store, t, cond)?;
        let (mut z, mut skips) = self.unet.down_forward(tape, store, a_t, film_cond)?;

        let taps = if hooks.capture_taps {
            Some(UNetTaps {
                backbone: tape.value(z).clone(),
                skips: [tape.value(skips[0]).clone(), tape.value(skips[1]).clone()],
            })
        } else {
            None
        };

        if let Some(r) = &hooks.replace_backbone {
            z = broadcast_const(tape, r, tape.shape(z).to_vec())?;
        }
        for i in 0..2 {
            if let Some(r) = &hooks.replace_skip[i] {
                skips[i] = broadcast_const(tape, r, tape.shape(skips[i]).to_vec())?;
            }
        }

        if let Some(noise) = &hooks.backbone_noise {
            let nb = broadcast_const(tape, noise, tape.shape(z).to_vec())?;
            z = tape.add(z, nb)?;
        }

        let (mut z_hat, kl_per_sample) = match vr_mode {
            VrMode::Bypass => (z, None),
            mode => {
                let heads = self.vr.as_ref().ok_or_else(|| {
                    CoreError::invalid("policy_forward", "bottleneck disabled but mode is not bypass")
                })?;
                let ts = if self.vr_cfg.use_timestep {
                    Some(t)
                } else {
                    None
                };
                let out = heads.forward(tape, store, z, ts, mode, vr_rng)?;
                (out.z_hat, Some(out.kl_per_sample))
            }
        };

        if let Some(m) = &hooks.mask_backbone {
            let mb = broadcast_const(tape, m, tape.shape(z_hat).to_vec())?;
            z_hat = tape.mul(z_hat, mb)?;
        }
        for i in 0..2 {
            if let Some(m) = &hooks.mask_skip[i] {
                let mb = broadcast_const(tape, m, tape.shape(skips[i]).to_vec())?;
                skips[i] = tape.mul(skips[i], mb)?;
            }
        }

        let a0_hat = self.unet.up_forward(tape, store, z_hat, skips, film_cond)?;
        Ok(PolicyOut {
            a0_hat,
            kl_per_sample,
            taps,
        })
    }

    /// Plain denoiser contract: bottleneck bypassed, taps captured.
    /// `a_t` is `[action_dim, H]`, the condition a flat vector.
    pub fn unet_forward(&self, a_t: &Tensor, t: usize, cond: &Tensor) -> Result<(Tensor, UNetTaps)> {
        let mut tape = Tape::new();
        let shape = a_t.shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::invalid(
                "unet_forward",
                "expected [action_dim, H] input",
            ));
        }
        let av = tape.constant(a_t.reshape([1, shape[0], shape[1]])?)?;
        let cv = tape.constant(cond.reshape([1, cond.numel()])?)?;
        let hooks = ForwardHooks {
            capture_taps: true,
            ..Default::default()
        };
        let out = self.forward(
            &mut tape,
            &self.store,
            av,
            &[t],
            cv,
            VrMode::Bypass,
            None,
            &hooks,
        )?;
        let pred = tape.value(out.a0_hat).reshape(shape)?;
        let mut taps = out.taps.expect("taps requested");
        // drop the unit batch axis from captured taps
        let squeeze = |t: &Tensor| {
            let s = t.shape().to_vec();
            t.reshape([s[1], s[2]]).expect("squeeze")
        };
        taps.backbone = squeeze(&taps.backbone);
        taps.skips = [squeeze(&taps.skips[0]), squeeze(&taps.skips[1])];
        Ok((pred, taps))
    }

    /// Encode one observation window into a condition vector.
    pub fn encode_obs(&self, window: &ObsWindow) -> Result<Tensor> {
        self.encoder.encode(&self.store, window)
    }
}

fn broadcast_const(tape: &mut Tape, t: &Tensor, target: Vec<usize>) -> Result<VarId> {
    let c = tape.constant(t.clone())?;
    tape.broadcast_to(c, target)
}

/// Adapter running the policy inside the iterative sampler.
///
/// Per-step interventions (mask redraws, noise injection) come from
/// `step_hooks`, invoked once per denoising step with the current timestep.
pub struct PolicySampler<'a> {
    pub model: &'a PolicyModel,
    pub store: &'a ParamStore,
    /// Flat `[n_obs * cond_dim]` condition for this plan.
    pub cond: Tensor,
    pub vr_mode: VrMode,
    pub vr_rng: Option<&'a mut Rng>,
    pub step_hooks: Option<&'a mut dyn FnMut(usize) -> Result<ForwardHooks>>,
}

impl DenoiseModel for PolicySampler<'_> {
    fn predict_x0(&mut self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let shape = x_t.shape().to_vec();
        let mut tape = Tape::new();
        let av = tape.constant(x_t.reshape([1, shape[0], shape[1]])?)?;
        let cv = tape.constant(self.cond.reshape([1, self.cond.numel()])?)?;
        let hooks = match &mut self.step_hooks {
            Some(f) => f(t)?,
            None => ForwardHooks::default(),
        };
        let out = self.model.forward(
            &mut tape,
            self.store,
            av,
            &[t],
            cv,
            self.vr_mode,
            self.vr_rng.as_deref_mut(),
            &hooks,
        )?;
        tape.value(out.a0_hat).reshape(shape)
    }
}

/// Sample one normalized action trajectory `[H, action_dim]` for `cond`.
///
/// `init_rng` drives the initial noise (and sampler noise when eta > 0);
/// `vr_rng` drives the bottleneck draws; `step_hooks` supplies per-step
/// interventions.
#[allow(clippy::too_many_arguments)]
pub fn sample_trajectory<'a>(
    model: &'a PolicyModel,
    store: &'a ParamStore,
    cond: &Tensor,
    scfg: &SamplerConfig,
    sched: &NoiseSchedule,
    init_rng: &mut Rng,
    vr_rng: Option<&'a mut Rng>,
    step_hooks: Option<&'a mut dyn FnMut(usize) -> Result<ForwardHooks>>,
) -> Result<ActionTrajectory> {
    let mut sampler = PolicySampler {
        model,
        store,
        cond: cond.clone(),
        vr_mode: model.inference_vr_mode(),
        vr_rng,
        step_hooks,
    };
    let shape = [model.cfg.action_dim, model.cfg.horizon];
    let out = ddim_sample(&mut sampler, &shape, scfg, sched, init_rng)?;
    Ok(ActionTrajectory {
        actions: out.transpose2()?,
        normalized: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(vr_enabled: bool) -> PolicyModel {
        let cfg = ModelConfig {
            down_dims: [4, 8, 16],
            horizon: 8,
            cond_dim: 4,
            enc_hidden: 8,
            k_points: 6,
            ..Default::default()
        };
        let vr_cfg = VrConfig {
            enabled: vr_enabled,
            hidden: 4,
            film_hidden: 8,
            ..Default::default()
        };
        PolicyModel::new(cfg, vr_cfg, 7).unwrap()
    }

    fn run_forward(
        model: &PolicyModel,
        vr_mode: VrMode,
        hooks: &ForwardHooks,
        vr_rng: Option<&mut Rng>,
    ) -> (Tape, PolicyOut) {
        let mut tape = Tape::new();
        let mut rng = Rng::from_seed(3);
        let a_t = tape
            .constant(Tensor::randn([2, 2, model.cfg.horizon], &mut rng))
            .unwrap();
        let cond = tape
            .constant(Tensor::randn([2, model.cfg.cond_total()], &mut rng))
            .unwrap();
        let out = model
            .forward(&mut tape, &model.store, a_t, &[3, 88], cond, vr_mode, vr_rng, hooks)
            .unwrap();
        (tape, out)
    }

    #[test]
    fn tap_capture_is_non_invasive() {
        let model = tiny_model(false);
        let plain = run_forward(&model, VrMode::Bypass, &ForwardHooks::default(), None);
        let hooks = ForwardHooks {
            capture_taps: true,
            ..Default::default()
        };
        let taped = run_forward(&model, VrMode::Bypass, &hooks, None);
        assert_eq!(
            plain.0.value(plain.1.a0_hat).data(),
            taped.0.value(taped.1.a0_hat).data()
        );
    }

    #[test]
    fn replacing_taps_with_captured_values_is_bit_exact() {
        let model = tiny_model(false);
        let hooks = ForwardHooks {
            capture_taps: true,
            ..Default::default()
        };
        let (tape, out) = run_forward(&model, VrMode::Bypass, &hooks, None);
        let taps = out.taps.unwrap();
        let replay_hooks = ForwardHooks {
            replace_backbone: Some(taps.backbone.clone()),
            replace_skip: [Some(taps.skips[0].clone()), Some(taps.skips[1].clone())],
            ..Default::default()
        };
        let (tape2, out2) = run_forward(&model, VrMode::Bypass, &replay_hooks, None);
        assert_eq!(
            tape.value(out.a0_hat).data(),
            tape2.value(out2.a0_hat).data()
        );
    }

    #[test]
    fn bottleneck_modes_wire_through() {
        let model = tiny_model(true);
        let mut vr_rng = Rng::stream(5, "vr", 0);
        let (tape, out) = run_forward(
            &model,
            VrMode::Stochastic,
            &ForwardHooks::default(),
            Some(&mut vr_rng),
        );
        let kl = out.kl_per_sample.unwrap();
        assert_eq!(tape.shape(kl), &[2]);
        assert!(tape.value(kl).data().iter().all(|&v| v >= 0.0));

        // disabled model refuses non-bypass modes
        let off = tiny_model(false);
        let mut tape = Tape::new();
        let a_t = tape.constant(Tensor::zeros([1, 2, 8])).unwrap();
        let cond = tape.constant(Tensor::zeros([1, 8])).unwrap();
        assert!(off
            .forward(
                &mut tape,
                &off.store,
                a_t,
                &[1],
                cond,
                VrMode::Deterministic,
                None,
                &ForwardHooks::default()
            )
            .is_err());
    }

    #[test]
    fn unet_forward_contract() {
        let model = tiny_model(false);
        let mut rng = Rng::from_seed(9);
        let a_t = Tensor::randn([2, 8], &mut rng);
        let cond = Tensor::randn([8], &mut rng);
        let (pred, taps) = model.unet_forward(&a_t, 40, &cond).unwrap();
        assert_eq!(pred.shape(), &[2, 8]);
        assert_eq!(taps.backbone.shape(), &[16, 2]);
        assert_eq!(taps.skips[0].shape(), &[8, 4]);
        assert_eq!(taps.skips[1].shape(), &[4, 8]);
    }

    #[test]
    fn default_width_backbone_tap_is_128_by_4() {
        let model = PolicyModel::new(ModelConfig::default(), VrConfig::default(), 1).unwrap();
        let mut rng = Rng::from_seed(2);
        let a_t = Tensor::randn([2, 16], &mut rng);
        let cond = Tensor::randn([128], &mut rng);
        let (_, taps) = model.unet_forward(&a_t, 10, &cond).unwrap();
        assert_eq!(taps.backbone.shape(), &[128, 4]);
    }

    #[test]
    fn bottleneck_parameter_share_is_small() {
        let model = PolicyModel::new(ModelConfig::default(), VrConfig::default(), 1).unwrap();
        let vr = model.vr_param_values();
        let total = model.store.total_values();
        let ratio = vr as f64 / total as f64;
        assert!(ratio <= 0.02, "bottleneck holds {:.3}% of parameters", 100.0 * ratio);
    }

    #[test]
    fn sampling_is_deterministic_given_streams() {
        let model = tiny_model(true);
        let sched = NoiseSchedule::make(crate::schedule::ScheduleKind::Linear, 100).unwrap();
        let scfg = SamplerConfig::default();
        let mut rng = Rng::from_seed(12);
        let cond = Tensor::randn([model.cfg.cond_total()], &mut rng);
        let run = || {
            let mut init = Rng::stream(9, "init-noise", 4);
            let mut vr = Rng::stream(9, "vr-noise", 4);
            sample_trajectory(
                &model,
                &model.store,
                &cond,
                &scfg,
                &sched,
                &mut init,
                Some(&mut vr),
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.actions.data(), b.actions.data());
        assert_eq!(a.actions.shape(), &[8, 2]);
        assert!(a.normalized);
        assert!(a.actions.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn masking_backbone_changes_output_and_full_mask_zeroes_it() {
        let model = tiny_model(false);
        let zeros = Tensor::zeros([16, 2]);
        let hooks = ForwardHooks {
            mask_backbone: Some(zeros.clone()),
            capture_taps: true,
            ..Default::default()
        };
        let (tape, out) = run_forward(&model, VrMode::Bypass, &hooks, None);
        // masked backbone = replacing it with zeros
        let replay = ForwardHooks {
            replace_backbone: Some(zeros),
            ..Default::default()
        };
        let (tape2, out2) = run_forward(&model, VrMode::Bypass, &replay, None);
        assert_eq!(
            tape.value(out.a0_hat).data(),
            tape2.value(out2.a0_hat).data()
        );
    }
}

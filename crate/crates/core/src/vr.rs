//! Variational bottleneck over the U-Net backbone feature.
//!
//! A timestep-conditioned Gaussian is placed over the bottleneck feature map
//! `Z`: a feature-wise affine driven by the timestep embedding modulates `Z`,
//! two tiny position-shared MLPs (1x1 convs) predict the feature-wise mean
//! and standard deviation, and the filtered feature is drawn by
//! reparameterization, `z_hat = mu + sigma * eps`. Training adds the
//! closed-form KL of this Gaussian against a standard normal, weighted by
//! `beta`.
//!
//! At initialization the module is an almost-transparent noisy channel:
//! `mu == Z` exactly (residual head with zeroed final layer) and
//! `sigma ~= 1`.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nets::{timestep_embedding, Conv1dLayer, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// How the bottleneck behaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum VrMode {
    /// Module removed entirely: `z_hat = Z`, no KL. This is the baseline.
    Bypass,
    /// `z_hat = mu` (no sampling).
    Deterministic,
    /// `z_hat = mu + sigma * eps` with fresh `eps`.
    Stochastic,
}

/// Bottleneck configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VrConfig {
    pub enabled: bool,
    /// KL weight in the training loss.
    pub beta: f64,
    /// Inject the diffusion timestep via the feature-wise affine stage.
    pub use_timestep: bool,
    /// Additive floor under softplus keeping sigma strictly positive.
    pub sigma_floor: f64,
    /// Mode used while sampling actions (bypass is implied when disabled).
    pub inference_mode: VrMode,
    /// Width of the mean/std head bottleneck.
    pub hidden: usize,
    /// Hidden width of the timestep-affine MLP.
    pub film_hidden: usize,
}

impl Default for VrConfig {
    fn default() -> Self {
        VrConfig {
            enabled: true,
            beta: 1e-9,
            use_timestep: true,
            sigma_floor: 1e-4,
            inference_mode: VrMode::Stochastic,
            hidden: 8,
            film_hidden: 16,
        }
    }
}

impl VrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(CoreError::invalid("vr_config", "beta must be >= 0"));
        }
        if self.sigma_floor <= 0.0 {
            return Err(CoreError::invalid("vr_config", "sigma_floor must be > 0"));
        }
        if self.hidden == 0 || self.film_hidden == 0 {
            return Err(CoreError::invalid("vr_config", "zero hidden width"));
        }
        if self.inference_mode == VrMode::Bypass && self.enabled {
            return Err(CoreError::invalid(
                "vr_config",
                "inference_mode bypass is expressed by enabled = false",
            ));
        }
        Ok(())
    }
}

/// One sampled pass through the bottleneck at the value level.
#[derive(Debug, Clone)]
pub struct VRSample {
    pub z_hat: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub kl: f64,
}

/// Tape-level outputs of the bottleneck.
pub struct VrTapeOut {
    pub z_hat: VarId,
    pub mu: VarId,
    pub sigma: VarId,
    /// KL summed over feature elements, one entry per batch row.
    pub kl_per_sample: VarId,
}

/// Parameters of the bottleneck heads.
#[derive(Debug, Clone)]
pub struct VrHeads {
    film: Option<(Linear, Linear)>,
    mu1: Conv1dLayer,
    mu2: Conv1dLayer,
    sigma1: Conv1dLayer,
    sigma2: Conv1dLayer,
    pub channels: usize,
    pub t_emb_dim: usize,
    pub sigma_floor: f64,
}

impl VrHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        t_emb_dim: usize,
        cfg: &VrConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let film = if cfg.use_timestep {
            let f1 = Linear::new(
                store,
                &format!("{name}.film.fc1"),
                t_emb_dim,
                cfg.film_hidden,
                rng,
            )?;
            // zero-init: the affine stage starts as an exact identity
            let f2 = Linear::new_zeroed(
                store,
                &format!("{name}.film.fc2"),
                cfg.film_hidden,
                2 * channels,
                0.0,
            )?;
            Some((f1, f2))
        } else {
            None
        };
        let mu1 = Conv1dLayer::new(
            store,
            &format!("{name}.mu.fc1"),
            channels,
            cfg.hidden,
            1,
            1,
            0,
            rng,
        )?;
        let mu2 =
            Conv1dLayer::new_zeroed(store, &format!("{name}.mu.fc2"), cfg.hidden, channels, 1, 0.0)?;
        let sigma1 = Conv1dLayer::new(
            store,
            &format!("{name}.sigma.fc1"),
            channels,
            cfg.hidden,
            1,
            1,
            0,
            rng,
        )?;
        // softplus(ln(e-1)) == 1, so sigma starts at 1 + sigma_floor
        let sigma_bias = math::ln(math::exp(1.0) - 1.0);
        let sigma2 = Conv1dLayer::new_zeroed(
            store,
            &format!("{name}.sigma.fc2"),
            cfg.hidden,
            channels,
            1,
            sigma_bias,
        )?;
        Ok(VrHeads {
            film,
            mu1,
            mu2,
            sigma1,
            sigma2,
            channels,
            t_emb_dim,
            sigma_floor: cfg.sigma_floor,
        })
    }

    /// Run the bottleneck on `z: [B, C, L]`.
    ///
    /// `t` supplies the per-row timesteps for the affine stage; `None`
    /// bypasses it (the "no timestep injection" variant). `rng` is required
    /// in stochastic mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: VarId,
        t: Option<&[usize]>,
        mode: VrMode,
        mut rng: Option<&mut Rng>,
    ) -> Result<VrTapeOut> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(CoreError::invalid(
                "vr_forward",
                format!("expected [B, {}, L] feature, got {:?}", self.channels, shape),
            ));
        }
        if mode == VrMode::Bypass {
            return Err(CoreError::invalid(
                "vr_forward",
                "bypass mode skips the module; do not call forward",
            ));
        }
        let batch = shape[0];

        // Timestep-conditioned feature-wise affine on Z.
        let zf = match (&self.film, t) {
            (Some((f1, f2)), Some(ts)) => {
                if ts.len() != batch {
                    return Err(CoreError::invalid(
                        "vr_forward",
                        format!("{} timesteps for batch {}", ts.len(), batch),
                    ));
                }
                let mut emb = Tensor::zeros([batch, self.t_emb_dim]);
                for (i, &ti) in ts.iter().enumerate() {
                    let e = timestep_embedding(ti, self.t_emb_dim);
                    emb.data_mut()[i * self.t_emb_dim..(i + 1) * self.t_emb_dim]
                        .copy_from_slice(e.data());
                }
                let ev = tape.constant(emb)?;
                let h = tape.mish(ev)?;
                let h = f1.forward(tape, store, h)?;
                let h = tape.mish(h)?;
                let affine = f2.forward(tape, store, h)?;
                let scale = tape.slice(affine, 1, 0, self.channels)?;
                let shift = tape.slice(affine, 1, self.channels, 2 * self.channels)?;
                crate::nets::film(tape, z, scale, shift)?
            }
            _ => z,
        };

        // Position-shared heads.
        let mh = self.mu1.forward(tape, store, zf)?;
        let mh = tape.mish(mh)?;
        let dm = self.mu2.forward(tape, store, mh)?;
        let mu = tape.add(zf, dm)?;

        let sh = self.sigma1.forward(tape, store, zf)?;
        let sh = tape.mish(sh)?;
        let raw = self.sigma2.forward(tape, store, sh)?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, self.sigma_floor)?;

        let z_hat = match mode {
            VrMode::Deterministic => mu,
            VrMode::Stochastic => {
                let r = rng.as_deref_mut().ok_or_else(|| {
                    CoreError::invalid("vr_forward", "stochastic mode requires an rng stream")
                })?;
                let eps = tape.constant(Tensor::randn(shape.clone(), r))?;
                let noise = tape.mul(sigma, eps)?;
                tape.add(mu, noise)?
            }
            VrMode::Bypass => unreachable!(),
        };

        let kl_per_sample = kl_on_tape(tape, mu, sigma, batch)?;
        Ok(VrTapeOut {
            z_hat,
            mu,
            sigma,
            kl_per_sample,
        })
    }

    /// Value-level pass on one `[C, L]` feature map.
    pub fn sample(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: usize,
        mode: VrMode,
        rng: Option<&mut Rng>,
    ) -> Result<VRSample> {
        self.sample_inner(store, z, Some(t), mode, rng)
    }

    /// As [`VrHeads::sample`] with the timestep affine stage bypassed
    /// (`scale = shift = 0`), so the output is independent of `t`.
    pub fn sample_without_t(
        &self,
        store: &ParamStore,
        z: &Tensor,
        mode: VrMode,
        rng: Option<&mut Rng>,
    ) -> Result<VRSample> {
        self.sample_inner(store, z, None, mode, rng)
    }

    fn sample_inner(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: Option<usize>,
        mode: VrMode,
        rng: Option<&mut Rng>,
    ) -> Result<VRSample> {
        let shape = z.shape().to_vec();
        if shape.len() != 2 {
            return Err(CoreError::invalid(
                "vr_forward",
                format!("expected [C, L] feature, got {shape:?}"),
            ));
        }
        let (c, l) = (shape[0], shape[1]);
        let mut tape = Tape::new();
        let zv = tape.constant(z.reshape([1, c, l])?)?;
        let ts = t.map(|t| alloc::vec![t]);
        let out = self.forward(&mut tape, store, zv, ts.as_deref(), mode, rng)?;
        Ok(VRSample {
            z_hat: tape.value(out.z_hat).reshape([c, l])?,
            mu: tape.value(out.mu).reshape([c, l])?,
            sigma: tape.value(out.sigma).reshape([c, l])?,
            kl: tape.value(out.kl_per_sample).data()[0],
        })
    }
}

/// KL((mu, sigma) || N(0, I)) summed over feature elements per batch row:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_on_tape(tape: &mut Tape, mu: VarId, sigma: VarId, batch: usize) -> Result<VarId> {
    let numel: usize = tape.value(mu).numel();
    let per_row = numel / batch;
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let lns = tape.ln(sigma)?;
    let a = tape.add(mu2, s2)?;
    let a = tape.add_scalar(a, -1.0)?;
    let l2 = tape.scale(lns, 2.0)?;
    let elems = tape.sub(a, l2)?;
    let flat = tape.reshape(elems, [batch, per_row])?;
    let row = tape.sum_axis(flat, 1)?;
    tape.scale(row, 0.5)
}

/// Closed-form KL of an elementwise Gaussian to the standard normal:
/// `0.5 * sum_i(mu_i^2 + sigma_i^2 - 1 - 2 ln sigma_i)`.
///
/// Zero exactly when `mu = 0, sigma = 1`; positive otherwise.
pub fn kl_to_standard_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "kl_to_standard_normal",
            lhs: mu.shape().to_vec(),
            rhs: sigma.shape().to_vec(),
        });
    }
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(CoreError::invalid(
            "kl_to_standard_normal",
            "sigma must be > 0 elementwise",
        ));
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        acc += 0.5 * (m * m + s * s - 1.0 - 2.0 * math::ln(s));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn heads(use_t: bool) -> (ParamStore, VrHeads) {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(21, "init", 0);
        let cfg = VrConfig {
            use_timestep: use_t,
            ..Default::default()
        };
        let h = VrHeads::new(&mut store, "vr", 6, 8, &cfg, &mut rng).unwrap();
        (store, h)
    }

    #[test]
    fn deterministic_mode_returns_mu_bit_exact() {
        let (store, h) = heads(true);
        let mut rng = Rng::from_seed(2);
        let z = Tensor::randn([6, 4], &mut rng);
        let s = h.sample(&store, &z, 17, VrMode::Deterministic, None).unwrap();
        assert_eq!(s.z_hat.data(), s.mu.data());
    }

    #[test]
    fn near_identity_at_init() {
        let (store, h) = heads(true);
        let mut rng = Rng::from_seed(3);
        let z = Tensor::randn([6, 4], &mut rng);
        let s = h.sample(&store, &z, 5, VrMode::Deterministic, None).unwrap();
        // mu == z exactly: film is zero-init identity and the mu head is a
        // zeroed residual
        assert_eq!(s.mu.data(), z.data());
        for &sv in s.sigma.data() {
            assert!((sv - (1.0 + 1e-4)).abs() < 1e-12, "sigma {sv}");
        }
    }

    #[test]
    fn kl_closed_form_analytic_points() {
        let mu0 = Tensor::zeros([5]);
        let sig1 = Tensor::full([5], 1.0);
        assert_eq!(kl_to_standard_normal(&mu0, &sig1).unwrap(), 0.0);

        let mu1 = Tensor::full([1], 1.0);
        let s1 = Tensor::full([1], 1.0);
        assert!((kl_to_standard_normal(&mu1, &s1).unwrap() - 0.5).abs() < 1e-12);

        let bad = Tensor::full([1], 0.0);
        assert!(kl_to_standard_normal(&mu1, &bad).is_err());
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = Rng::from_seed(9);
        for _ in 0..200 {
            let mu = Tensor::randn([8], &mut rng);
            let sigma = Tensor::randn([8], &mut rng).map(|v| math::exp(0.5 * v));
            let kl = kl_to_standard_normal(&mu, &sigma).unwrap();
            assert!(kl >= 0.0, "kl {kl}");
        }
    }

    #[test]
    fn kl_gradients_are_mu_and_sigma_minus_inv_sigma() {
        let mut rng = Rng::from_seed(10);
        let mu = Tensor::randn([4], &mut rng);
        let sigma = Tensor::randn([4], &mut rng).map(|v| 0.5 + math::abs(v));

        let mut tape = Tape::new();
        let mv = tape.input(mu.clone()).unwrap();
        let sv = tape.input(sigma.clone()).unwrap();
        let m3 = tape.reshape(mv, [1, 4, 1]).unwrap();
        let s3 = tape.reshape(sv, [1, 4, 1]).unwrap();
        let kl = kl_on_tape(&mut tape, m3, s3, 1).unwrap();
        let loss = tape.sum(kl).unwrap();
        tape.backward(loss).unwrap();
        let gm = tape.grad(mv).unwrap();
        let gs = tape.grad(sv).unwrap();
        for i in 0..4 {
            assert!((gm.data()[i] - mu.data()[i]).abs() <= 1e-6);
            let expect = sigma.data()[i] - 1.0 / sigma.data()[i];
            assert!((gs.data()[i] - expect).abs() <= 1e-6);
        }

        // and against finite differences
        let sig_fixed = sigma.clone();
        let err = grad_check(
            |t, v| {
                let s = t.constant(sig_fixed.clone())?;
                let m3 = t.reshape(v, [1, 4, 1])?;
                let s3 = t.reshape(s, [1, 4, 1])?;
                let kl = kl_on_tape(t, m3, s3, 1)?;
                t.sum(kl)
            },
            &mu,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "kl mu grad err {err}");
    }

    #[test]
    fn reparameterized_gradients() {
        // z_hat = mu + sigma * eps for fixed eps: dz/dmu = 1, dz/dsigma = eps
        let mut rng = Rng::from_seed(11);
        let eps = Tensor::randn([5], &mut rng);
        let mu = Tensor::randn([5], &mut rng);
        let sigma = Tensor::randn([5], &mut rng).map(|v| 0.5 + math::abs(v));

        let mut tape = Tape::new();
        let mv = tape.input(mu).unwrap();
        let sv = tape.input(sigma).unwrap();
        let ev = tape.constant(eps.clone()).unwrap();
        let noise = tape.mul(sv, ev).unwrap();
        let zh = tape.add(mv, noise).unwrap();
        let loss = tape.sum(zh).unwrap();
        tape.backward(loss).unwrap();
        for (i, &g) in tape.grad(mv).unwrap().data().iter().enumerate() {
            assert!((g - 1.0).abs() < 1e-15, "dmu[{i}]");
        }
        for (i, &g) in tape.grad(sv).unwrap().data().iter().enumerate() {
            assert!((g - eps.data()[i]).abs() < 1e-15, "dsigma[{i}]");
        }
    }

    #[test]
    fn disable_t_output_independent_of_t() {
        let (store, h) = heads(true);
        let mut rng = Rng::from_seed(12);
        let z = Tensor::randn([6, 4], &mut rng);
        let mut r1 = Rng::stream(50, "vr", 0);
        let mut r2 = Rng::stream(50, "vr", 0);
        let a = h
            .sample_without_t(&store, &z, VrMode::Stochastic, Some(&mut r1))
            .unwrap();
        let b = h
            .sample_without_t(&store, &z, VrMode::Stochastic, Some(&mut r2))
            .unwrap();
        assert_eq!(a.z_hat.data(), b.z_hat.data());
        // deterministic mode is the mu path only
        let c = h
            .sample_without_t(&store, &z, VrMode::Deterministic, None)
            .unwrap();
        assert_eq!(c.z_hat.data(), c.mu.data());
    }

    #[test]
    fn timestep_injection_changes_output_when_film_nonzero() {
        let (mut store, h) = heads(true);
        // perturb the zero-initialized affine output layer so t matters
        let idx = store.index_of("vr.film.fc2.weight").unwrap();
        let mut rng = Rng::from_seed(13);
        *store.value_mut(idx) =
            Tensor::randn(store.value(idx).shape().to_vec(), &mut rng).scale(0.1);
        let z = Tensor::randn([6, 4], &mut rng);
        let a = h.sample(&store, &z, 1, VrMode::Deterministic, None).unwrap();
        let b = h.sample(&store, &z, 99, VrMode::Deterministic, None).unwrap();
        assert_ne!(a.z_hat.data(), b.z_hat.data());
    }

    #[test]
    fn stochastic_mode_requires_rng() {
        let (store, h) = heads(false);
        let z = Tensor::zeros([6, 4]);
        assert!(h
            .sample_without_t(&store, &z, VrMode::Stochastic, None)
            .is_err());
    }

    #[test]
    fn forced_small_sigma_keeps_zhat_near_z() {
        let (mut store, h) = heads(true);
        // push the sigma head bias strongly negative: softplus -> ~0, so
        // sigma ~= sigma_floor and z_hat = z + O(sigma_floor)
        let idx = store.index_of("vr.sigma.fc2.bias").unwrap();
        *store.value_mut(idx) = Tensor::full([6], -40.0);
        let mut rng = Rng::from_seed(14);
        let z = Tensor::randn([6, 4], &mut rng);
        let mut vr_rng = Rng::stream(60, "vr", 0);
        let s = h
            .sample(&store, &z, 7, VrMode::Stochastic, Some(&mut vr_rng))
            .unwrap();
        for (a, b) in s.z_hat.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 10.0 * 1e-4, "{a} vs {b}");
        }
    }
}

//! Noise schedules, the forward diffusion process, and the deterministic
//! few-step sampler used at inference.
//!
//! Timesteps are 1-based: `t` runs over `1..=T` during training, and the
//! cumulative product table uses the convention `alpha_bar(0) == 1`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape of the beta curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    Linear,
    SquaredCosine,
}

/// Per-timestep noise tables for `T` training steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const LINEAR_BETA_MIN: f64 = 1e-4;
const LINEAR_BETA_MAX: f64 = 2e-2;

impl NoiseSchedule {
    /// Build the table for `kind` with `T >= 1` steps.
    pub fn make(kind: ScheduleKind, num_steps: usize) -> Result<Self> {
        if num_steps < 1 {
            return Err(CoreError::invalid("make_schedule", "T must be >= 1"));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..num_steps)
                .map(|i| {
                    if num_steps == 1 {
                        LINEAR_BETA_MIN
                    } else {
                        LINEAR_BETA_MIN
                            + (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * i as f64
                                / (num_steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::SquaredCosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let v = math::cos((t / num_steps as f64 + s) / (1.0 + s) * math::PI / 2.0);
                    v * v
                };
                let f0 = f(0.0);
                let mut prev_bar = 1.0;
                (1..=num_steps)
                    .map(|t| {
                        let bar = f(t as f64) / f0;
                        let b = math::clamp(1.0 - bar / prev_bar, 1e-8, 0.999);
                        prev_bar = bar;
                        b
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let s = NoiseSchedule {
            num_steps,
            beta,
            alpha,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    /// Build from explicit tables. Lengths and basic range/monotonicity are
    /// checked; the product relation between `alpha` and `alpha_bar` is not,
    /// so diagnostics can feed in deliberately inconsistent tables.
    pub fn from_tables(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>) -> Result<Self> {
        let num_steps = beta.len();
        if alpha.len() != num_steps || alpha_bar.len() != num_steps || num_steps == 0 {
            return Err(CoreError::invalid(
                "schedule.from_tables",
                "tables must be non-empty and equal length",
            ));
        }
        let s = NoiseSchedule {
            num_steps,
            beta,
            alpha,
            alpha_bar,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let mut prev = 1.0; // alpha_bar(0) convention
        for t in 0..self.num_steps {
            let b = self.beta[t];
            if !(0.0 < b && b < 1.0) {
                return Err(CoreError::invalid(
                    "schedule",
                    format!("beta[{}] = {} outside (0,1)", t + 1, b),
                ));
            }
            if self.alpha_bar[t] >= prev || self.alpha_bar[t] <= 0.0 {
                return Err(CoreError::invalid(
                    "schedule",
                    format!(
                        "alpha_bar must be strictly decreasing from 1, bad at t={}",
                        t + 1
                    ),
                ));
            }
            prev = self.alpha_bar[t];
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps {
            return Err(CoreError::invalid(
                op,
                format!("t={} outside 1..={}", t, self.num_steps),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Inference-time sampler settings.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub num_train_steps: usize,
    pub num_inference_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_train_steps: 100,
            num_inference_steps: 10,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_inference_steps == 0 || self.num_inference_steps > self.num_train_steps {
            return Err(CoreError::invalid(
                "sampler_config",
                format!(
                    "inference steps {} must be in 1..={}",
                    self.num_inference_steps, self.num_train_steps
                ),
            ));
        }
        if self.eta < 0.0 {
            return Err(CoreError::invalid("sampler_config", "eta must be >= 0"));
        }
        Ok(())
    }
}

/// Closed-form marginal sample: `x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t("q_sample", t)?;
    if x0.shape() != eps.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = s.alpha_bar(t);
    let c0 = math::sqrt(ab);
    let ce = math::sqrt(1.0 - ab);
    x0.scale(c0).add(&eps.scale(ce))
}

/// Sample `x_t` by iterating the single-step kernel
/// `x_tau = sqrt(1-beta_tau) x_{tau-1} + sqrt(beta_tau) eps_tau` for
/// `tau = 1..=t`.
pub fn chain_sample(x0: &Tensor, t: usize, s: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    s.check_t("chain_sample", t)?;
    let mut x = x0.clone();
    for tau in 1..=t {
        let keep = math::sqrt(1.0 - s.beta(tau));
        let noise = math::sqrt(s.beta(tau));
        let eps = Tensor::randn(x.shape().to_vec(), rng);
        x = x.scale(keep).add(&eps.scale(noise))?;
    }
    Ok(x)
}

/// One deterministic (eta = 0) or stochastic sampler update from `t` down to
/// `t_prev`. The predicted noise is recovered from `(x_t, x0_hat)`:
///
/// `eps_hat = (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t)`
/// `x_prev  = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma z`
pub fn ddim_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Tensor> {
    s.check_t("ddim_step", t)?;
    if t_prev >= t {
        return Err(CoreError::invalid(
            "ddim_step",
            format!("t_prev {t_prev} must be < t {t}"),
        ));
    }
    x0_hat.check_finite("ddim_step")?;
    let ab_t = s.alpha_bar(t);
    let ab_p = s.alpha_bar(t_prev);

    let eps_hat = x_t
        .sub(&x0_hat.scale(math::sqrt(ab_t)))?
        .scale(1.0 / math::sqrt(1.0 - ab_t));

    let sigma = if eta > 0.0 {
        eta * math::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math::sqrt(1.0 - ab_t / ab_p)
    } else {
        0.0
    };
    let dir = math::sqrt(math::max(1.0 - ab_p - sigma * sigma, 0.0));

    let mut x = x0_hat.scale(math::sqrt(ab_p)).add(&eps_hat.scale(dir))?;
    if sigma > 0.0 {
        let r = rng
            .as_deref_mut()
            .ok_or_else(|| CoreError::invalid("ddim_step", "eta > 0 requires an rng stream"))?;
        let z = Tensor::randn(x.shape().to_vec(), r);
        x = x.add(&z.scale(sigma))?;
    }
    Ok(x)
}

/// The descending timestep subsequence visited at inference: evenly spaced
/// over `1..=T` with round-to-nearest, always including `t = T`, followed by
/// an implicit final hop to 0 performed by the sampler loop.
pub fn inference_timesteps(cfg: &SamplerConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let t_max = cfg.num_train_steps as f64;
    let n = cfg.num_inference_steps;
    let mut ts: Vec<usize> = (1..=n)
        .rev()
        .map(|i| math::round(t_max * i as f64 / n as f64) as usize)
        .collect();
    ts.dedup();
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    debug_assert_eq!(ts[0], cfg.num_train_steps);
    Ok(ts)
}

/// Anything that can predict the clean sample from a noisy one.
///
/// `&mut self` because implementations may consume per-step randomness
/// (stochastic bottleneck draws, mask redraws).
pub trait DenoiseModel {
    fn predict_x0(&mut self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Full sampler: start from standard normal noise of `shape`, visit the
/// inference subsequence, and clamp the final trajectory to [-1, 1] once.
///
/// Pure function of (model state, config, rng stream).
pub fn ddim_sample(
    model: &mut dyn DenoiseModel,
    shape: &[usize],
    cfg: &SamplerConfig,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let ts = inference_timesteps(cfg)?;
    let mut x = Tensor::randn(shape.to_vec(), rng);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let x0_hat = model.predict_x0(&x, t)?;
        x0_hat.check_finite("ddim_sample")?;
        let eta_rng = if cfg.eta > 0.0 { Some(&mut *rng) } else { None };
        x = ddim_step(&x, &x0_hat, t, t_prev, s, cfg.eta, eta_rng)?;
    }
    Ok(x.clamp(-1.0, 1.0))
}

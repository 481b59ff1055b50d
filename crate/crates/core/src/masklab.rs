//! Inference-time random feature masking: mask the backbone or a lateral
//! feature while rolling out a trained policy, sweep the masking probability,
//! and reduce the sweep to two signal-to-noise proxy metrics:
//!
//! 1. peak gain — best mean success over the probability grid minus the
//!    unmasked baseline;
//! 2. full-mask delta — mean success with the block fully removed minus the
//!    unmasked baseline.
//!
//! Masks are redrawn at every denoising step from the episode's dedicated
//! mask stream, so a p = 0 sweep consumes no trajectory-relevant randomness
//! and reproduces the plain evaluation exactly.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::envs::{success_rate, Env, ModelPolicy};
use crate::error::{CoreError, Result};
use crate::nets::{ForwardHooks, PolicyModel};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, SamplerConfig};
use crate::tensor::Tensor;
use crate::train::Normalizer;

/// Which feature block a mask acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskTarget {
    Backbone,
    /// Lateral feature index: 0 = deep, 1 = shallow.
    Skip(usize),
}

impl MaskTarget {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskTarget::Skip(i) if *i > 1 => Err(CoreError::invalid(
                "mask_target",
                format!("skip index {i} must be 0 (deep) or 1 (shallow)"),
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MaskTarget::Backbone => "backbone".into(),
            MaskTarget::Skip(i) => format!("skip{i}"),
        }
    }
}

/// How zeroing is grouped within a `[C, L]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MaskScheme {
    /// Each channel row is zeroed independently with probability p.
    Channel,
    /// Each temporal column is zeroed independently with probability p.
    Point,
}

/// One test-time masking instruction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskSpec {
    pub target: MaskTarget,
    pub scheme: MaskScheme,
    pub p: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if !(0.0..=1.0).contains(&self.p) {
            return Err(CoreError::invalid(
                "mask_spec",
                format!("p {} outside [0, 1]", self.p),
            ));
        }
        Ok(())
    }
}

/// Draw a 0/1 mask of shape `[c, l]`: one uniform per group (channel row or
/// temporal column) in index order, zeroed when `u < p`.
pub fn draw_mask(c: usize, l: usize, scheme: MaskScheme, p: f64, rng: &mut Rng) -> Tensor {
    let mut mask = Tensor::full([c, l], 1.0);
    match scheme {
        MaskScheme::Channel => {
            for ci in 0..c {
                if rng.uniform() < p {
                    mask.data_mut()[ci * l..(ci + 1) * l].fill(0.0);
                }
            }
        }
        MaskScheme::Point => {
            for li in 0..l {
                if rng.uniform() < p {
                    for ci in 0..c {
                        mask.data_mut()[ci * l + li] = 0.0;
                    }
                }
            }
        }
    }
    mask
}

/// Zero masked groups of a `[C, L]` feature map; untouched entries are
/// copied bit-identically.
pub fn apply_mask(feature: &Tensor, spec: &MaskSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    feature.check_finite("apply_mask")?;
    let shape = feature.shape();
    if shape.len() != 2 {
        return Err(CoreError::invalid(
            "apply_mask",
            format!("expected [C, L] feature, got {shape:?}"),
        ));
    }
    let (c, l) = (shape[0], shape[1]);
    let mask = draw_mask(c, l, spec.scheme, spec.p, rng);
    let mut out = feature.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m == 0.0 {
            *o = 0.0;
        }
    }
    Ok(out)
}

/// Sweep settings; counts are desk-scale and recorded in the report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepConfig {
    pub target: MaskTarget,
    pub scheme: MaskScheme,
    /// Probability grid; must contain 0 (the baseline row).
    pub grid: Vec<f64>,
    pub n_seeds: usize,
    pub n_rollouts: usize,
    pub n_action_steps: usize,
    pub base_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            target: MaskTarget::Backbone,
            scheme: MaskScheme::Channel,
            grid: alloc::vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            n_seeds: 20,
            n_rollouts: 20,
            n_action_steps: 8,
            base_seed: 0,
        }
    }
}

/// Success-rate grid of a masking sweep plus its derived statistics.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    pub target: String,
    pub scheme: MaskScheme,
    pub grid: Vec<f64>,
    /// `rates[i][s]` = success rate at `grid[i]` under sweep seed `s`.
    pub rates: Vec<Vec<f64>>,
    pub n_seeds: usize,
    pub n_rollouts: usize,
    /// Mean success at p = 0.
    pub baseline_rate: f64,
    /// Masks are redrawn at every denoising step.
    pub redraw_per_step: bool,
}

impl SweepReport {
    /// Mean success rate per grid entry.
    pub fn means(&self) -> Vec<f64> {
        self.rates
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }

    /// Standard error of the per-seed rates per grid entry.
    pub fn stderrs(&self) -> Vec<f64> {
        self.rates
            .iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                if row.len() < 2 {
                    return 0.0;
                }
                let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
                crate::math::sqrt(var / n)
            })
            .collect()
    }
}

/// Per-denoising-step hook provider used by the sweep: fixed additive
/// backbone corruption (diagnostics) plus a freshly drawn mask.
pub fn sweep_hooks<'a>(
    target: MaskTarget,
    scheme: MaskScheme,
    p: f64,
    shapes: FeatureShapes,
    backbone_noise: Option<Tensor>,
) -> Box<dyn FnMut(usize, &mut Rng) -> Result<ForwardHooks> + 'a> {
    Box::new(move |_t, mask_rng| {
        let (c, l) = match target {
            MaskTarget::Backbone => shapes.backbone,
            MaskTarget::Skip(i) => shapes.skips[i],
        };
        let mask = draw_mask(c, l, scheme, p, mask_rng);
        let mut hooks = ForwardHooks {
            backbone_noise: backbone_noise.clone(),
            ..Default::default()
        };
        match target {
            MaskTarget::Backbone => hooks.mask_backbone = Some(mask),
            MaskTarget::Skip(i) => hooks.mask_skip[i] = Some(mask),
        }
        Ok(hooks)
    })
}

/// `[C, L]` extents of the maskable features for a model config.
#[derive(Debug, Clone, Copy)]
pub struct FeatureShapes {
    pub backbone: (usize, usize),
    pub skips: [(usize, usize); 2],
}

impl FeatureShapes {
    pub fn of(model: &PolicyModel) -> Self {
        let h = model.cfg.horizon;
        let [d0, d1, d2] = model.cfg.down_dims;
        FeatureShapes {
            backbone: (d2, h / 4),
            skips: [(d1, h / 2), (d0, h)],
        }
    }
}

/// Run the masking sweep: for every grid probability and sweep seed, roll
/// out the policy with per-step mask redraws and record the success rate.
///
/// Episode randomness depends only on `(base_seed, sweep seed, episode)` —
/// never on p — so the p = 0 column reproduces the plain evaluation exactly.
/// `backbone_noise`, when given, is injected at every cell (the constructed
/// negative control for the full-mask metric).
pub fn mask_sweep(
    model: &PolicyModel,
    normalizer: &Normalizer,
    env: &Env,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    cfg: &SweepConfig,
    backbone_noise: Option<Tensor>,
) -> Result<SweepReport> {
    cfg.target.validate()?;
    if cfg.grid.is_empty() || !cfg.grid.contains(&0.0) {
        return Err(CoreError::invalid(
            "mask_sweep",
            "grid must be non-empty and contain p = 0 (the baseline row)",
        ));
    }
    if cfg.n_seeds == 0 || cfg.n_rollouts == 0 {
        return Err(CoreError::invalid("mask_sweep", "zero seeds or rollouts"));
    }
    for &p in &cfg.grid {
        MaskSpec {
            target: cfg.target,
            scheme: cfg.scheme,
            p,
            seed: 0,
        }
        .validate()?;
    }
    let shapes = FeatureShapes::of(model);

    let mut rates = Vec::with_capacity(cfg.grid.len());
    for &p in &cfg.grid {
        let mut per_seed = Vec::with_capacity(cfg.n_seeds);
        for s in 0..cfg.n_seeds {
            let mut policy = ModelPolicy::new(model, normalizer, sched, *scfg);
            policy.hooks_fn = Some(sweep_hooks(
                cfg.target,
                cfg.scheme,
                p,
                shapes,
                backbone_noise.clone(),
            ));
            let eval_seed = derive_cell_seed(cfg.base_seed, s);
            let out = success_rate(&mut policy, env, eval_seed, cfg.n_rollouts, cfg.n_action_steps)?;
            per_seed.push(out.rate);
        }
        rates.push(per_seed);
    }

    let baseline_idx = cfg.grid.iter().position(|&p| p == 0.0).expect("checked");
    let baseline_rate =
        rates[baseline_idx].iter().sum::<f64>() / rates[baseline_idx].len() as f64;
    Ok(SweepReport {
        target: cfg.target.label(),
        scheme: cfg.scheme,
        grid: cfg.grid.clone(),
        rates,
        n_seeds: cfg.n_seeds,
        n_rollouts: cfg.n_rollouts,
        baseline_rate,
        redraw_per_step: true,
    })
}

/// Episode seed of one (sweep seed) column, independent of p.
pub fn derive_cell_seed(base_seed: u64, sweep_seed: usize) -> u64 {
    Rng::stream(base_seed, "sweep.cell", sweep_seed as u64).next_u64()
}

/// The two proxy metrics: `(peak_gain, full_mask_delta)`.
///
/// Requires both the p = 0 and p = 1 rows.
pub fn snr_metrics(report: &SweepReport) -> Result<(f64, f64)> {
    let means = report.means();
    let base = report
        .grid
        .iter()
        .position(|&p| p == 0.0)
        .ok_or_else(|| CoreError::invalid("snr_metrics", "missing p = 0 row"))?;
    let full = report
        .grid
        .iter()
        .position(|&p| p == 1.0)
        .ok_or_else(|| CoreError::invalid("snr_metrics", "missing p = 1 row"))?;
    let best = means.iter().cloned().fold(f64::NEG_INFINITY, crate::math::max);
    Ok((best - means[base], means[full] - means[base]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(scheme: MaskScheme, p: f64) -> MaskSpec {
        MaskSpec {
            target: MaskTarget::Backbone,
            scheme,
            p,
            seed: 0,
        }
    }

    #[test]
    fn p_zero_is_bit_exact_passthrough() {
        let mut rng = Rng::from_seed(1);
        let f = Tensor::randn([6, 4], &mut rng);
        let mut mask_rng = Rng::stream(2, "mask", 0);
        let out = apply_mask(&f, &spec(MaskScheme::Channel, 0.0), &mut mask_rng).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn p_one_zeroes_everything() {
        let mut rng = Rng::from_seed(2);
        let f = Tensor::randn([6, 4], &mut rng);
        for scheme in [MaskScheme::Channel, MaskScheme::Point] {
            let mut mask_rng = Rng::stream(3, "mask", 0);
            let out = apply_mask(&f, &spec(scheme, 1.0), &mut mask_rng).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zeroed_fraction_matches_binomial() {
        let c = 10;
        let p = 0.3;
        let n = 100_000;
        let mut rng = Rng::stream(4, "mask", 0);
        let mut zeroed = 0usize;
        for _ in 0..n {
            let m = draw_mask(c, 3, MaskScheme::Channel, p, &mut rng);
            for ci in 0..c {
                if m.data()[ci * 3] == 0.0 {
                    zeroed += 1;
                }
            }
        }
        let total = (n * c) as f64;
        let frac = zeroed as f64 / total;
        let se = crate::math::sqrt(p * (1.0 - p) / total);
        assert!((frac - p).abs() < 4.0 * se, "frac {frac}");
    }

    #[test]
    fn point_mask_equals_channel_mask_of_transpose() {
        let mut rng = Rng::from_seed(5);
        let f = Tensor::randn([5, 7], &mut rng);
        let mut r1 = Rng::stream(6, "mask", 1);
        let mut r2 = Rng::stream(6, "mask", 1);
        let a = apply_mask(&f, &spec(MaskScheme::Point, 0.4), &mut r1).unwrap();
        let ft = f.transpose2().unwrap();
        let b = apply_mask(
            &ft,
            &MaskSpec {
                target: MaskTarget::Backbone,
                scheme: MaskScheme::Channel,
                p: 0.4,
                seed: 0,
            },
            &mut r2,
        )
        .unwrap();
        assert_eq!(a.data(), b.transpose2().unwrap().data());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(MaskScheme::Channel, 1.5).validate().is_err());
        assert!(spec(MaskScheme::Channel, -0.1).validate().is_err());
        assert!(MaskTarget::Skip(2).validate().is_err());
        assert!(MaskTarget::Skip(1).validate().is_ok());
    }

    #[test]
    fn snr_metrics_arithmetic() {
        let mk = |grid: Vec<f64>, means: Vec<f64>| SweepReport {
            target: "backbone".into(),
            scheme: MaskScheme::Channel,
            grid,
            rates: means.iter().map(|&m| alloc::vec![m]).collect(),
            n_seeds: 1,
            n_rollouts: 1,
            baseline_rate: means[0],
            redraw_per_step: true,
        };
        // stated example: rates [0.5, 0.6, 0.55, 0.4] on p = [0, .3, .6, 1]
        let r = mk(alloc::vec![0.0, 0.3, 0.6, 1.0], alloc::vec![0.5, 0.6, 0.55, 0.4]);
        let (peak, full) = snr_metrics(&r).unwrap();
        assert!((peak - 0.1).abs() < 1e-12);
        assert!((full - -0.1).abs() < 1e-12);

        // flat curve
        let r = mk(alloc::vec![0.0, 0.5, 1.0], alloc::vec![0.7, 0.7, 0.7]);
        assert_eq!(snr_metrics(&r).unwrap(), (0.0, 0.0));

        // monotone decreasing
        let r = mk(alloc::vec![0.0, 0.5, 1.0], alloc::vec![0.8, 0.6, 0.2]);
        let (peak, full) = snr_metrics(&r).unwrap();
        assert_eq!(peak, 0.0);
        assert!(full < 0.0);

        // missing p = 1
        let r = mk(alloc::vec![0.0, 0.5], alloc::vec![0.8, 0.6]);
        assert!(snr_metrics(&r).is_err());
    }
}

//! Executable numeric checks of the objective's information-theoretic
//! structure:
//!
//! - the closed-form Gaussian KL against Monte Carlo estimates;
//! - the exact equivalence (up to a parameter-independent constant) between
//!   the training objective and the scaled variational bound built from a
//!   fixed-variance Gaussian decoder, including its negative control;
//! - the compression bound on an analytically tractable linear-Gaussian
//!   channel, where the mutual information has a closed form;
//! - statistical consistency between the iterated forward-noising chain and
//!   its closed-form marginal, including a corrupted-table negative control.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nets::{ModelConfig, Observation, PolicyModel};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::schedule::{chain_sample, NoiseSchedule, ScheduleKind};
use crate::tensor::Tensor;
use crate::train::{policy_loss, DemoDataset, Episode, TrainSample};
use crate::vr::VrConfig;

// ── Gaussian log-likelihood ─────────────────────────────────────────────

/// Log density of `a0` under an isotropic Gaussian centered at `a0_hat`:
/// `-(||a0_hat - a0||^2) / (2 sigma2) - (d/2) ln(2 pi sigma2)`.
pub fn gaussian_loglik(a0: &Tensor, a0_hat: &Tensor, sigma2: f64, d: usize) -> Result<f64> {
    if sigma2 <= 0.0 {
        return Err(CoreError::invalid("gaussian_loglik", "sigma2 must be > 0"));
    }
    if a0.shape() != a0_hat.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "gaussian_loglik",
            lhs: a0.shape().to_vec(),
            rhs: a0_hat.shape().to_vec(),
        });
    }
    if d != a0.numel() || d == 0 {
        return Err(CoreError::invalid(
            "gaussian_loglik",
            "d must equal the number of elements",
        ));
    }
    let mut err2 = 0.0;
    for (&a, &b) in a0.data().iter().zip(a0_hat.data()) {
        err2 += (b - a) * (b - a);
    }
    Ok(-err2 / (2.0 * sigma2) - (d as f64 / 2.0) * math::ln(2.0 * math::PI * sigma2))
}

// ── Objective / bound equivalence ───────────────────────────────────────

/// The pieces shared by the training objective and the variational bound,
/// evaluated once on a batch so both sides reuse the same bottleneck draws.
///
/// Reductions here follow the bound's conventions: squared error is summed
/// over the `d = H * action_dim` output elements and averaged over the
/// batch; KL is summed over feature elements and averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// E ||a0_hat - a0||^2 (sum over d, mean over batch).
    pub mse: f64,
    /// E[KL] (sum over feature elements, mean over batch).
    pub kl: f64,
    /// E[log q(a0 | z_hat, laterals)] under the fixed-variance decoder.
    pub loglik: f64,
    pub sigma2: f64,
    /// Compression weight; linked as `alpha = beta / (2 sigma2)`.
    pub alpha: f64,
    pub beta: f64,
    pub d: usize,
}

impl ElboTerms {
    /// Evaluate on one batch via a single stochastic forward pass.
    pub fn evaluate(
        model: &PolicyModel,
        store: &ParamStore,
        batch: &[TrainSample],
        sched: &NoiseSchedule,
        sigma2: f64,
        beta: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sigma2 <= 0.0 {
            return Err(CoreError::invalid("elbo_terms", "sigma2 must be > 0"));
        }
        let d = model.cfg.horizon * model.cfg.action_dim;
        let bundle = policy_loss(model, store, batch, sched, beta, rng)?;
        // policy_loss averages the squared error over batch * d elements
        let mse = bundle.parts.mse * d as f64;
        let kl = bundle.parts.kl;
        let loglik = -mse / (2.0 * sigma2)
            - (d as f64 / 2.0) * math::ln(2.0 * math::PI * sigma2);
        Ok(ElboTerms {
            mse,
            kl,
            loglik,
            sigma2,
            alpha: beta / (2.0 * sigma2),
            beta,
            d,
        })
    }

    /// Objective value under the bound's reductions:
    /// `E||err||^2 + beta * E[KL]`.
    pub fn policy_objective(&self) -> f64 {
        self.mse + self.beta * self.kl
    }

    /// The parameter-free part of the scaled bound:
    /// `-2 sigma2 * (E[log q] - alpha * E[KL])`.
    pub fn scaled_bound(&self) -> f64 {
        -2.0 * self.sigma2 * (self.loglik - self.alpha * self.kl)
    }

    /// The constant the two sides must differ by:
    /// `-sigma2 * d * ln(2 pi sigma2)`.
    pub fn expected_constant(&self) -> f64 {
        -self.sigma2 * self.d as f64 * math::ln(2.0 * math::PI * self.sigma2)
    }
}

/// Absolute and relative residual of the equivalence
/// `policy_objective - scaled_bound == constant`.
pub fn corollary_residual(terms: &ElboTerms) -> (f64, f64) {
    let lhs = terms.policy_objective() - terms.scaled_bound();
    let resid = math::abs(lhs - terms.expected_constant());
    (resid, resid / math::max(1.0, math::abs(lhs)))
}

/// Evaluate the equivalence residual for a batch; must be <= 1e-9 relative
/// when `alpha = beta / (2 sigma2)` holds.
pub fn corollary1_residual(
    model: &PolicyModel,
    store: &ParamStore,
    batch: &[TrainSample],
    sched: &NoiseSchedule,
    sigma2: f64,
    beta: f64,
    rng: &mut Rng,
) -> Result<(f64, ElboTerms)> {
    let terms = ElboTerms::evaluate(model, store, batch, sched, sigma2, beta, rng)?;
    let (_, rel) = corollary_residual(&terms);
    Ok((rel, terms))
}

// ── Monte Carlo KL oracle ───────────────────────────────────────────────

/// Monte Carlo estimate of `E_p[ln p(z) - ln q(z)]` for the elementwise
/// Gaussian `p = N(mu, diag(sigma^2))` against the standard normal, with its
/// standard error. Oracle for the closed form.
pub fn kl_mc(mu: &Tensor, sigma: &Tensor, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n < 10_000 {
        return Err(CoreError::invalid("kl_mc", "n must be >= 10^4"));
    }
    if mu.shape() != sigma.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "kl_mc",
            lhs: mu.shape().to_vec(),
            rhs: sigma.shape().to_vec(),
        });
    }
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(CoreError::invalid("kl_mc", "sigma must be > 0"));
    }
    let dim = mu.numel();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n {
        let mut v = 0.0;
        for i in 0..dim {
            let m = mu.data()[i];
            let s = sigma.data()[i];
            let eps = rng.normal();
            let z = m + s * eps;
            // ln p - ln q; the 2 pi normalizers cancel
            v += -math::ln(s) - 0.5 * eps * eps + 0.5 * z * z;
        }
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean) * n as f64 / (n as f64 - 1.0);
    Ok((mean, math::sqrt(var / n as f64)))
}

// ── Forward-process marginal consistency ────────────────────────────────

/// Per-coordinate z statistics of one marginal check.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarginalCoordStat {
    pub mean_z: f64,
    pub var_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MarginalCheck {
    pub t: usize,
    pub n: usize,
    pub pass: bool,
    pub coords: Vec<MarginalCoordStat>,
}

/// Draw `n` iterated-chain samples of `x_t` and z-test their per-coordinate
/// mean and variance against the closed-form marginal at 4 sigma.
pub fn marginal_consistency_check(
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<MarginalCheck> {
    if n < 10_000 {
        return Err(CoreError::invalid(
            "marginal_consistency_check",
            "n must be >= 10^4",
        ));
    }
    let x0 = Tensor::from_vec(alloc::vec![0.6, -0.4]);
    let dim = x0.numel();
    let mut sum = alloc::vec![0.0; dim];
    let mut sumsq = alloc::vec![0.0; dim];
    for _ in 0..n {
        let xt = chain_sample(&x0, t, sched, rng)?;
        for (k, &v) in xt.data().iter().enumerate() {
            sum[k] += v;
            sumsq[k] += v * v;
        }
    }
    let ab = sched.alpha_bar(t);
    let target_var = 1.0 - ab;
    let nf = n as f64;
    let mut coords = Vec::with_capacity(dim);
    let mut pass = true;
    for k in 0..dim {
        let mean = sum[k] / nf;
        let var = (sumsq[k] / nf - mean * mean) * nf / (nf - 1.0);
        let target_mean = math::sqrt(ab) * x0.data()[k];
        let mean_z = (mean - target_mean) / math::sqrt(target_var / nf);
        let var_z = (var - target_var) / (target_var * math::sqrt(2.0 / (nf - 1.0)));
        if math::abs(mean_z) >= 4.0 || math::abs(var_z) >= 4.0 {
            pass = false;
        }
        coords.push(MarginalCoordStat { mean_z, var_z });
    }
    Ok(MarginalCheck { t, n, pass, coords })
}

// ── Linear-Gaussian channel bound ───────────────────────────────────────

/// One row of the channel-bound table: a scalar channel `z = a x + s eps`
/// with `x ~ N(0,1)` has closed-form mutual information
/// `I = 0.5 ln(1 + a^2/s^2)` and expected KL-to-standard-normal
/// `E[KL] = 0.5 (a^2 + s^2 - 1 - ln s^2)`; the bound `I <= E[KL]` is tight
/// exactly when `a^2 + s^2 = 1`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InfoBoundRow {
    pub gain: f64,
    pub noise: f64,
    pub mutual_information: f64,
    pub expected_kl: f64,
    pub holds: bool,
}

pub fn info_bound_row(gain: f64, noise: f64) -> Result<InfoBoundRow> {
    if noise <= 0.0 {
        return Err(CoreError::invalid("info_bound", "noise must be > 0"));
    }
    let mi = 0.5 * math::ln_1p(gain * gain / (noise * noise));
    let ekl = 0.5 * (gain * gain + noise * noise - 1.0 - math::ln(noise * noise));
    Ok(InfoBoundRow {
        gain,
        noise,
        mutual_information: mi,
        expected_kl: ekl,
        holds: mi <= ekl + 1e-12,
    })
}

// ── Full verification suite ─────────────────────────────────────────────

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random scalar (mu, sigma) pairs checked against Monte Carlo.
    pub kl_pairs: usize,
    pub kl_mc_n: usize,
    pub marginal_ts: Vec<usize>,
    pub marginal_n: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            kl_pairs: 50,
            kl_mc_n: 1_000_000,
            marginal_ts: alloc::vec![1, 25, 50, 99],
            marginal_n: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KlMcRow {
    pub analytic: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorollaryCell {
    pub sigma2: f64,
    pub beta: f64,
    pub residual_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TheoryReport {
    pub kl_analytic_zero_ok: bool,
    pub kl_analytic_half_ok: bool,
    pub kl_mc_rows: Vec<KlMcRow>,
    pub kl_mc_vector_row: KlMcRow,
    pub corollary_cells: Vec<CorollaryCell>,
    /// Relative residual with the linkage deliberately broken; must be large.
    pub corollary_negative_residual: f64,
    pub corollary_negative_fails: bool,
    pub marginal_checks: Vec<MarginalCheck>,
    /// A corrupted cumulative-product table must fail the marginal check.
    pub marginal_negative_fails: bool,
    pub info_bound_rows: Vec<InfoBoundRow>,
    pub all_pass: bool,
    pub notes: Vec<String>,
}

fn toy_batch(model: &PolicyModel, seed: u64) -> Result<Vec<TrainSample>> {
    let cfg = &model.cfg;
    let mut rng = Rng::stream(seed, "verify.batch", 0);
    let steps = 6;
    let episodes = alloc::vec![Episode {
        observations: (0..steps)
            .map(|_| Observation {
                points: Tensor::randn([cfg.k_points, cfg.point_dim], &mut rng),
                proprio: Tensor::randn([cfg.proprio_dim], &mut rng),
            })
            .collect(),
        actions: Tensor::randn([steps, cfg.action_dim], &mut rng).scale(0.4),
    }];
    let ds = DemoDataset::from_episodes(episodes)?;
    (0..2)
        .map(|i| ds.sample(0, i, cfg.horizon, cfg.n_obs))
        .collect()
}

/// A small random policy used by the equivalence checks.
pub fn verification_model(seed: u64) -> Result<PolicyModel> {
    let cfg = ModelConfig {
        down_dims: [4, 8, 16],
        horizon: 8,
        cond_dim: 4,
        enc_hidden: 8,
        k_points: 6,
        ..Default::default()
    };
    let vr_cfg = VrConfig {
        hidden: 4,
        film_hidden: 8,
        ..Default::default()
    };
    PolicyModel::new(cfg, vr_cfg, seed)
}

/// Run every theory check and aggregate a pass/fail report.
pub fn run_verification(cfg: &VerifyConfig) -> Result<TheoryReport> {
    let mut notes = Vec::new();

    // closed-form anchor points
    let kl_analytic_zero_ok = {
        let mu = Tensor::zeros([3]);
        let sig = Tensor::full([3], 1.0);
        math::abs(crate::vr::kl_to_standard_normal(&mu, &sig)?) <= 1e-12
    };
    let kl_analytic_half_ok = {
        let mu = Tensor::full([1], 1.0);
        let sig = Tensor::full([1], 1.0);
        math::abs(crate::vr::kl_to_standard_normal(&mu, &sig)? - 0.5) <= 1e-12
    };

    // closed form vs Monte Carlo on random scalar pairs
    let mut pair_rng = Rng::stream(cfg.seed, "verify.kl-pairs", 0);
    let mut mc_rng = Rng::stream(cfg.seed, "verify.kl-mc", 0);
    let mut kl_mc_rows = Vec::with_capacity(cfg.kl_pairs);
    for _ in 0..cfg.kl_pairs {
        let mu = Tensor::full([1], pair_rng.normal());
        let sigma = Tensor::full([1], math::exp(0.5 * pair_rng.normal()));
        let analytic = crate::vr::kl_to_standard_normal(&mu, &sigma)?;
        let (estimate, stderr) = kl_mc(&mu, &sigma, cfg.kl_mc_n, &mut mc_rng)?;
        let pass = math::abs(estimate - analytic) <= 4.0 * stderr;
        kl_mc_rows.push(KlMcRow {
            analytic,
            estimate,
            stderr,
            pass,
        });
    }
    // one higher-dimensional row
    let kl_mc_vector_row = {
        let dim = 64;
        let mut mu = Tensor::zeros([dim]);
        let mut sigma = Tensor::zeros([dim]);
        for i in 0..dim {
            mu.data_mut()[i] = 0.5 * pair_rng.normal();
            sigma.data_mut()[i] = math::exp(0.3 * pair_rng.normal());
        }
        let analytic = crate::vr::kl_to_standard_normal(&mu, &sigma)?;
        let (estimate, stderr) = kl_mc(&mu, &sigma, (cfg.kl_mc_n / 10).max(10_000), &mut mc_rng)?;
        KlMcRow {
            analytic,
            estimate,
            stderr,
            pass: math::abs(estimate - analytic) <= 4.0 * stderr,
        }
    };

    // objective / bound equivalence across the (sigma2, beta) grid
    let model = verification_model(cfg.seed ^ 0x5eed)?;
    let batch = toy_batch(&model, cfg.seed)?;
    let sched = NoiseSchedule::make(ScheduleKind::Linear, 100)?;
    let mut corollary_cells = Vec::new();
    let loss_rng = Rng::stream(cfg.seed, "verify.corollary", 0);
    for &sigma2 in &[0.25, 0.5, 1.0, 2.0] {
        for &beta in &[0.0, 1e-9, 1e-3] {
            let mut rng = loss_rng.clone();
            let (residual_rel, _) = corollary1_residual(
                &model,
                &model.store,
                &batch,
                &sched,
                sigma2,
                beta,
                &mut rng,
            )?;
            corollary_cells.push(CorollaryCell {
                sigma2,
                beta,
                residual_rel,
                pass: residual_rel <= 1e-9,
            });
        }
    }
    // negative control: break the alpha linkage at beta = 1e-3, sigma2 = 1
    let (corollary_negative_residual, corollary_negative_fails) = {
        let mut rng = loss_rng.clone();
        let mut terms =
            ElboTerms::evaluate(&model, &model.store, &batch, &sched, 1.0, 1e-3, &mut rng)?;
        terms.alpha *= 3.0;
        let (_, rel) = corollary_residual(&terms);
        (rel, rel > 1e-9)
    };

    // chain vs closed-form marginals
    let mut marginal_checks = Vec::new();
    for (i, &t) in cfg.marginal_ts.iter().enumerate() {
        let mut rng = Rng::stream(cfg.seed, "verify.marginal", i as u64);
        marginal_checks.push(marginal_consistency_check(&sched, t, cfg.marginal_n, &mut rng)?);
    }
    // negative control: a uniformly shrunk cumulative-product table is still
    // monotone but inconsistent with the kernel
    let marginal_negative_fails = {
        let bad = NoiseSchedule::from_tables(
            (1..=100).map(|t| sched.beta(t)).collect(),
            (1..=100).map(|t| sched.alpha(t)).collect(),
            (1..=100).map(|t| sched.alpha_bar(t) * 0.8).collect(),
        )?;
        let mut rng = Rng::stream(cfg.seed, "verify.marginal-neg", 0);
        !marginal_consistency_check(&bad, 50, cfg.marginal_n, &mut rng)?.pass
    };

    // compression bound on the linear-Gaussian channel
    let mut info_bound_rows = Vec::new();
    for &gain in &[0.0, 0.3, 0.6, 1.0, 2.0] {
        for &noise in &[0.25, 0.5, 1.0, 2.0] {
            info_bound_rows.push(info_bound_row(gain, noise)?);
        }
    }
    // tightness at gain^2 + noise^2 = 1
    {
        let row = info_bound_row(0.6, 0.8)?;
        if math::abs(row.mutual_information - row.expected_kl) > 1e-12 {
            notes.push("tightness case gain=0.6 noise=0.8 not tight".into());
        }
        info_bound_rows.push(row);
    }

    let all_pass = kl_analytic_zero_ok
        && kl_analytic_half_ok
        && kl_mc_rows.iter().all(|r| r.pass)
        && kl_mc_vector_row.pass
        && corollary_cells.iter().all(|c| c.pass)
        && corollary_negative_fails
        && marginal_checks.iter().all(|m| m.pass)
        && marginal_negative_fails
        && info_bound_rows.iter().all(|r| r.holds)
        && notes.is_empty();

    Ok(TheoryReport {
        kl_analytic_zero_ok,
        kl_analytic_half_ok,
        kl_mc_rows,
        kl_mc_vector_row,
        corollary_cells,
        corollary_negative_residual,
        corollary_negative_fails,
        marginal_checks,
        marginal_negative_fails,
        info_bound_rows,
        all_pass,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_analytic_points() {
        // normalizer cancels at sigma2 = 1/(2 pi), d = 1
        let a = Tensor::scalar(0.3);
        let v = gaussian_loglik(&a, &a, 1.0 / (2.0 * math::PI), 1).unwrap();
        assert!(v.abs() < 1e-15);

        // d = 1, sigma2 = 1, err = 1
        let b = Tensor::scalar(1.3);
        let v = gaussian_loglik(&a, &b, 1.0, 1).unwrap();
        let expect = -0.5 - 0.5 * math::ln(2.0 * math::PI);
        assert!((v - expect).abs() < 1e-15);

        assert!(gaussian_loglik(&a, &b, 0.0, 1).is_err());
        assert!(gaussian_loglik(&a, &b, 1.0, 2).is_err());
    }

    #[test]
    fn loglik_matches_direct_density_formula() {
        let mut rng = Rng::from_seed(3);
        for _ in 0..20 {
            let a0 = Tensor::randn([6], &mut rng);
            let a0h = Tensor::randn([6], &mut rng);
            let sigma2 = math::exp(rng.normal());
            let v = gaussian_loglik(&a0, &a0h, sigma2, 6).unwrap();
            // independent evaluation: sum of scalar Gaussian log densities
            let mut direct = 0.0;
            for (x, m) in a0.data().iter().zip(a0h.data()) {
                direct += -0.5 * math::ln(2.0 * math::PI * sigma2)
                    - (x - m) * (x - m) / (2.0 * sigma2);
            }
            assert!((v - direct).abs() <= 1e-12 * math::max(1.0, direct.abs()));
        }
    }

    #[test]
    fn loglik_maximized_at_match() {
        let a0 = Tensor::from_vec(alloc::vec![0.2, -0.7]);
        let best = gaussian_loglik(&a0, &a0, 0.5, 2).unwrap();
        for dx in [-0.4, -0.1, 0.1, 0.4] {
            let shifted = a0.map(|v| v + dx);
            assert!(gaussian_loglik(&a0, &shifted, 0.5, 2).unwrap() < best);
        }
    }

    #[test]
    fn corollary_residual_tiny_on_grid() {
        let model = verification_model(1).unwrap();
        let batch = toy_batch(&model, 1).unwrap();
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 100).unwrap();
        for &sigma2 in &[0.25, 0.5, 1.0, 2.0] {
            for &beta in &[0.0, 1e-9, 1e-3] {
                let mut rng = Rng::stream(2, "cor", 0);
                let (rel, _) = corollary1_residual(
                    &model,
                    &model.store,
                    &batch,
                    &sched,
                    sigma2,
                    beta,
                    &mut rng,
                )
                .unwrap();
                assert!(rel <= 1e-9, "sigma2={sigma2} beta={beta} rel={rel}");
            }
        }
    }

    #[test]
    fn broken_linkage_residual_grows_linearly_in_kl_mismatch() {
        let model = verification_model(2).unwrap();
        let batch = toy_batch(&model, 2).unwrap();
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 100).unwrap();
        let mut rng = Rng::stream(3, "cor", 0);
        let terms =
            ElboTerms::evaluate(&model, &model.store, &batch, &sched, 1.0, 1e-3, &mut rng)
                .unwrap();
        let mut r = Vec::new();
        for scale in [2.0, 4.0] {
            let mut t = terms;
            t.alpha *= scale;
            let (abs, _) = corollary_residual(&t);
            // residual = |2 sigma2 (alpha' - alpha) kl| = |beta (scale-1) kl|
            let expect = math::abs(2.0 * t.sigma2 * (t.alpha - terms.alpha) * t.kl);
            assert!((abs - expect).abs() <= 1e-9 * math::max(1.0, expect));
            r.push(abs);
        }
        assert!((r[1] / r[0] - 3.0).abs() < 1e-6, "linear growth in mismatch");
    }

    #[test]
    fn kl_mc_agrees_on_analytic_targets() {
        let mut rng = Rng::stream(4, "klmc", 0);
        let mu = Tensor::zeros([1]);
        let sig = Tensor::full([1], 1.0);
        let (est, se) = kl_mc(&mu, &sig, 50_000, &mut rng).unwrap();
        // the estimator is exact for the standard normal itself
        assert!(est.abs() <= 4.0 * se, "est {est} se {se}");

        let mu = Tensor::full([1], 1.0);
        let (est, se) = kl_mc(&mu, &sig, 50_000, &mut rng).unwrap();
        assert!((est - 0.5).abs() < 4.0 * se, "est {est} se {se}");

        assert!(kl_mc(&mu, &sig, 100, &mut rng).is_err());
    }

    #[test]
    fn marginal_check_passes_and_detects_corruption() {
        let sched = NoiseSchedule::make(ScheduleKind::Linear, 100).unwrap();
        let mut rng = Rng::stream(5, "marg", 0);
        let ok = marginal_consistency_check(&sched, 1, 20_000, &mut rng).unwrap();
        assert!(ok.pass, "{ok:?}");

        let bad = NoiseSchedule::from_tables(
            (1..=100).map(|t| sched.beta(t)).collect(),
            (1..=100).map(|t| sched.alpha(t)).collect(),
            (1..=100).map(|t| sched.alpha_bar(t) * 0.8).collect(),
        )
        .unwrap();
        let mut rng = Rng::stream(5, "marg", 1);
        let broken = marginal_consistency_check(&bad, 50, 20_000, &mut rng).unwrap();
        assert!(!broken.pass);
    }

    #[test]
    fn info_bound_holds_and_is_tight_on_unit_circle() {
        for &gain in &[0.0, 0.5, 1.0, 3.0] {
            for &noise in &[0.2, 1.0, 2.5] {
                let row = info_bound_row(gain, noise).unwrap();
                assert!(row.holds, "{row:?}");
            }
        }
        let tight = info_bound_row(0.6, 0.8).unwrap();
        assert!((tight.mutual_information - tight.expected_kl).abs() <= 1e-12);
        let loose = info_bound_row(1.0, 1.0).unwrap();
        assert!(loose.expected_kl - loose.mutual_information > 0.1);
    }

    #[test]
    fn small_verification_suite_passes() {
        let cfg = VerifyConfig {
            seed: 9,
            kl_pairs: 3,
            kl_mc_n: 20_000,
            marginal_ts: alloc::vec![1, 25],
            marginal_n: 20_000,
            ..Default::default()
        };
        let report = run_verification(&cfg).unwrap();
        assert!(report.all_pass, "{report:?}");
        assert!(report.corollary_negative_residual > 1e-9);
    }
}

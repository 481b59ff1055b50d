//! Synthetic 2D manipulation tasks with scripted experts, point-set
//! observation synthesis, receding-horizon rollout execution, and success
//! metrics.
//!
//! Two tasks of graded difficulty share one state layout in the unit square:
//!
//! - PointReach: the effector is the object; drive it to the goal.
//! - PushBox: the effector pushes a box toward the goal; contact is kinematic
//!   (a box within the contact radius moves by the effector displacement
//!   projected onto the effector-to-box direction, forward component only).
//!
//! Environments are pure state machines: `(state, action) -> state` with no
//! hidden globals. All remaining randomness (start sampling, observation
//! jitter, policy noise) flows through named per-episode streams.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::nets::Observation;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Task {
    PointReach,
    PushBox,
}

/// Fixed physical constants of the tasks. The defaults are verified by the
/// expert-success oracle tests.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvConfig {
    pub task: Task,
    /// Maximum effector displacement per step.
    pub v_max: f64,
    /// Success threshold on the object-goal distance.
    pub tau: f64,
    pub max_steps: usize,
    pub contact_radius: f64,
    /// Points synthesized per observation.
    pub k_points: usize,
    /// Gaussian jitter applied to each synthesized point coordinate.
    pub jitter_std: f64,
    /// Radius of the object/goal discs the points sit on.
    pub disc_radius: f64,
}

impl EnvConfig {
    pub fn point_reach() -> Self {
        EnvConfig {
            task: Task::PointReach,
            v_max: 0.05,
            tau: 0.03,
            max_steps: 100,
            contact_radius: 0.06,
            k_points: 32,
            jitter_std: 0.005,
            disc_radius: 0.04,
        }
    }

    pub fn push_box() -> Self {
        EnvConfig {
            task: Task::PushBox,
            ..EnvConfig::point_reach()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::PointReach => EnvConfig::point_reach(),
            Task::PushBox => EnvConfig::push_box(),
        }
    }
}

/// Full simulation state. Positions live in the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub effector: [f64; 2],
    pub prev_effector: [f64; 2],
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub step: usize,
}

/// Episode summary.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub success: bool,
    pub final_distance: f64,
    pub steps_used: usize,
    /// Object position after every executed step.
    pub trace: Vec<[f64; 2]>,
    /// The policy emitted a non-finite action and the episode was aborted.
    pub aborted_nonfinite: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    math::sqrt(dx * dx + dy * dy)
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [math::clamp(p[0], 0.0, 1.0), math::clamp(p[1], 0.0, 1.0)]
}

#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Self {
        Env { cfg }
    }

    /// Sample a solvable start state.
    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        match self.cfg.task {
            Task::PointReach => {
                let effector = [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)];
                let goal = loop {
                    let g = [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)];
                    if dist(g, effector) >= 0.2 {
                        break g;
                    }
                };
                EnvState {
                    effector,
                    prev_effector: effector,
                    object: effector,
                    goal,
                    step: 0,
                }
            }
            Task::PushBox => {
                let object = [rng.uniform_in(0.3, 0.7), rng.uniform_in(0.3, 0.7)];
                let goal = loop {
                    let g = [rng.uniform_in(0.15, 0.85), rng.uniform_in(0.15, 0.85)];
                    let d = dist(g, object);
                    if (0.15..=0.4).contains(&d) {
                        break g;
                    }
                };
                let effector = loop {
                    let e = [rng.uniform_in(0.1, 0.9), rng.uniform_in(0.1, 0.9)];
                    if dist(e, object) >= 0.12 {
                        break e;
                    }
                };
                EnvState {
                    effector,
                    prev_effector: effector,
                    object,
                    goal,
                    step: 0,
                }
            }
        }
    }

    /// Deterministic transition. The action is clamped into [-1, 1] per
    /// component and scaled by `v_max`.
    pub fn step(&self, state: &EnvState, action: [f64; 2]) -> EnvState {
        let a = [
            math::clamp(action[0], -1.0, 1.0),
            math::clamp(action[1], -1.0, 1.0),
        ];
        let old_eff = state.effector;
        let effector = clamp01([
            old_eff[0] + a[0] * self.cfg.v_max,
            old_eff[1] + a[1] * self.cfg.v_max,
        ]);
        let object = match self.cfg.task {
            Task::PointReach => effector,
            Task::PushBox => {
                let d_box = dist(old_eff, state.object);
                if d_box <= self.cfg.contact_radius && d_box > 1e-9 {
                    let ux = (state.object[0] - old_eff[0]) / d_box;
                    let uy = (state.object[1] - old_eff[1]) / d_box;
                    let disp = [effector[0] - old_eff[0], effector[1] - old_eff[1]];
                    let push = math::max(0.0, disp[0] * ux + disp[1] * uy);
                    clamp01([state.object[0] + push * ux, state.object[1] + push * uy])
                } else {
                    state.object
                }
            }
        };
        EnvState {
            effector,
            prev_effector: old_eff,
            object,
            goal: state.goal,
            step: state.step + 1,
        }
    }

    pub fn object_goal_distance(&self, state: &EnvState) -> f64 {
        dist(state.object, state.goal)
    }

    pub fn is_success(&self, state: &EnvState) -> bool {
        self.object_goal_distance(state) < self.cfg.tau
    }

    /// Synthesize the point-set observation: `k/2` points on the object disc
    /// boundary, `k/2` on the goal disc boundary, each jittered from the
    /// episode observation stream. Proprio is the current and previous
    /// effector position.
    pub fn observe(&self, state: &EnvState, rng: &mut Rng) -> Observation {
        let k = self.cfg.k_points;
        let half = k / 2;
        let mut pts = Tensor::zeros([k, 2]);
        for i in 0..k {
            let (center, j) = if i < half {
                (state.object, i)
            } else {
                (state.goal, i - half)
            };
            let angle = 2.0 * math::PI * j as f64 / half as f64;
            let x = center[0] + self.cfg.disc_radius * math::cos(angle)
                + self.cfg.jitter_std * rng.normal();
            let y = center[1] + self.cfg.disc_radius * math::sin(angle)
                + self.cfg.jitter_std * rng.normal();
            pts.data_mut()[i * 2] = x;
            pts.data_mut()[i * 2 + 1] = y;
        }
        let proprio = Tensor::new(
            [4],
            alloc::vec![
                state.effector[0],
                state.effector[1],
                state.prev_effector[0],
                state.prev_effector[1],
            ],
        )
        .expect("proprio shape");
        Observation {
            points: pts,
            proprio,
        }
    }

    /// Proportional scripted controller solving the task from any sampled
    /// start. Pure function of the state.
    pub fn scripted_expert(&self, state: &EnvState) -> [f64; 2] {
        let v = self.cfg.v_max;
        match self.cfg.task {
            Task::PointReach => [
                math::clamp((state.goal[0] - state.effector[0]) / v, -1.0, 1.0),
                math::clamp((state.goal[1] - state.effector[1]) / v, -1.0, 1.0),
            ],
            Task::PushBox => {
                let b = state.object;
                let g = state.goal;
                let e = state.effector;
                let bg = dist(b, g);
                if bg < 1e-9 {
                    return [0.0, 0.0];
                }
                let u = [(g[0] - b[0]) / bg, (g[1] - b[1]) / bg];
                let rc = self.cfg.contact_radius;
                let r = [e[0] - b[0], e[1] - b[1]];
                let proj = r[0] * u[0] + r[1] * u[1];

                if proj <= -0.3 * rc {
                    // behind the box: any incidental contact on the way in
                    // pushes toward the goal, so drive straight
                    let behind = [b[0] - 0.8 * rc * u[0], b[1] - 0.8 * rc * u[1]];
                    if dist(e, behind) <= 2.0 * v {
                        // engaged: aim through the box at the goal (the box
                        // only moves while the effector keeps displacing
                        // into it), slowing near the goal so the box cannot
                        // step across the success disc
                        let speed = math::clamp(bg / (2.0 * v), 0.3, 1.0);
                        return [
                            math::clamp((g[0] - e[0]) / v, -1.0, 1.0) * speed,
                            math::clamp((g[1] - e[1]) / v, -1.0, 1.0) * speed,
                        ];
                    }
                    return [
                        math::clamp((behind[0] - e[0]) / v, -1.0, 1.0),
                        math::clamp((behind[1] - e[1]) / v, -1.0, 1.0),
                    ];
                }

                // beside or in front: slide along a circle of safe radius
                // around the box toward its back side
                let rr = math::max(dist(e, b), 1e-9);
                let w = [r[0] / rr, r[1] / rr];
                let cross = w[0] * (-u[1]) - w[1] * (-u[0]);
                let sign = if cross >= 0.0 { 1.0 } else { -1.0 };
                let tangent = [-w[1] * sign, w[0] * sign];
                let radius = rc + 0.05;
                let radial = math::clamp((radius - rr) / v, -1.0, 1.0);
                let vel = [
                    tangent[0] + w[0] * radial,
                    tangent[1] + w[1] * radial,
                ];
                let norm = math::max(1.0, math::max(math::abs(vel[0]), math::abs(vel[1])));
                [vel[0] / norm, vel[1] / norm]
            }
        }
    }
}

// ── Rollouts ────────────────────────────────────────────────────────────

/// Named randomness of one episode. Splitting by purpose keeps diagnostics
/// (mask draws) from perturbing the trajectory-relevant streams.
pub struct EpisodeStreams {
    pub reset: Rng,
    pub obs: Rng,
    pub init_noise: Rng,
    pub vr: Rng,
    pub mask: Rng,
}

impl EpisodeStreams {
    pub fn new(seed: u64, episode_index: u64) -> Self {
        EpisodeStreams {
            reset: Rng::stream(seed, "ep.reset", episode_index),
            obs: Rng::stream(seed, "ep.obs", episode_index),
            init_noise: Rng::stream(seed, "ep.init-noise", episode_index),
            vr: Rng::stream(seed, "ep.vr", episode_index),
            mask: Rng::stream(seed, "ep.mask", episode_index),
        }
    }
}

/// A planner driven by the rollout loop: produce environment-scale actions
/// `[H, 2]` for the current observation window.
pub trait RolloutPolicy {
    fn window_len(&self) -> usize;
    fn plan(
        &mut self,
        state: &EnvState,
        window: &[Observation],
        streams: &mut EpisodeStreams,
    ) -> Result<Tensor>;
}

/// The scripted expert wrapped as a planner: it simulates itself forward to
/// fill the horizon, so open-loop execution replays its closed-loop path.
pub struct ExpertPolicy {
    pub env: Env,
    pub horizon: usize,
}

impl RolloutPolicy for ExpertPolicy {
    fn window_len(&self) -> usize {
        1
    }

    fn plan(
        &mut self,
        state: &EnvState,
        _window: &[Observation],
        _streams: &mut EpisodeStreams,
    ) -> Result<Tensor> {
        let mut out = Tensor::zeros([self.horizon, 2]);
        let mut sim = state.clone();
        for h in 0..self.horizon {
            let a = self.env.scripted_expert(&sim);
            out.data_mut()[h * 2] = a[0];
            out.data_mut()[h * 2 + 1] = a[1];
            sim = self.env.step(&sim, a);
        }
        Ok(out)
    }
}

/// Receding-horizon episode: plan, execute the first `n_action_steps`
/// actions, replan; stop on success or after `max_steps` environment steps.
/// Deterministic given `(seed, episode_index)`.
pub fn rollout(
    policy: &mut dyn RolloutPolicy,
    env: &Env,
    seed: u64,
    episode_index: u64,
    n_action_steps: usize,
) -> Result<EpisodeResult> {
    if n_action_steps == 0 {
        return Err(CoreError::invalid("rollout", "n_action_steps must be > 0"));
    }
    let mut streams = EpisodeStreams::new(seed, episode_index);
    let mut state = env.reset(&mut streams.reset);
    let mut history: Vec<Observation> = alloc::vec![env.observe(&state, &mut streams.obs)];
    let mut trace = Vec::new();
    let n_obs = policy.window_len();

    let mut success = env.is_success(&state);
    let mut aborted = false;
    while !success && state.step < env.cfg.max_steps && !aborted {
        let window: Vec<Observation> = (0..n_obs)
            .map(|k| {
                let idx = (history.len() + k).saturating_sub(n_obs);
                history[idx.min(history.len() - 1)].clone()
            })
            .collect();
        let plan = match policy.plan(&state, &window, &mut streams) {
            Ok(p) => p,
            Err(CoreError::NonFinite { .. }) => {
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !plan.is_finite() {
            aborted = true;
            break;
        }
        let steps = plan.shape()[0].min(n_action_steps);
        for k in 0..steps {
            let a = [plan.data()[k * 2], plan.data()[k * 2 + 1]];
            state = env.step(&state, a);
            trace.push(state.object);
            if env.is_success(&state) {
                success = true;
                break;
            }
            if state.step >= env.cfg.max_steps {
                break;
            }
        }
        if !success && state.step < env.cfg.max_steps && !aborted {
            history.push(env.observe(&state, &mut streams.obs));
        }
    }

    Ok(EpisodeResult {
        success,
        final_distance: env.object_goal_distance(&state),
        steps_used: state.step,
        trace,
        aborted_nonfinite: aborted,
    })
}

/// Aggregated evaluation outcome.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalOutcome {
    pub n: usize,
    pub successes: usize,
    pub rate: f64,
    pub aborted: usize,
}

/// Run `n` seeded rollouts and count successes.
pub fn success_rate(
    policy: &mut dyn RolloutPolicy,
    env: &Env,
    seed: u64,
    n: usize,
    n_action_steps: usize,
) -> Result<EvalOutcome> {
    if n == 0 {
        return Err(CoreError::invalid("success_rate", "n must be > 0"));
    }
    let mut successes = 0;
    let mut aborted = 0;
    for i in 0..n {
        let r = rollout(policy, env, seed, i as u64, n_action_steps)?;
        if r.success {
            successes += 1;
        }
        if r.aborted_nonfinite {
            aborted += 1;
        }
    }
    Ok(EvalOutcome {
        n,
        successes,
        rate: successes as f64 / n as f64,
        aborted,
    })
}

/// Mean of the five largest success rates in an evaluation history.
pub fn sr5(history: &[f64]) -> Result<f64> {
    if history.len() < 5 {
        return Err(CoreError::invalid(
            "sr5",
            alloc::format!("need at least 5 evaluation records, got {}", history.len()),
        ));
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite rates"));
    Ok(sorted[..5].iter().sum::<f64>() / 5.0)
}


// ── Learned-policy adapter ──────────────────────────────────────────────

use crate::nets::{sample_trajectory, ForwardHooks, PolicyModel};
use crate::schedule::{NoiseSchedule, SamplerConfig};
use crate::train::Normalizer;

/// The trained policy wrapped as a planner: encode the (normalized)
/// observation window, run the iterative sampler, denormalize the actions.
///
/// `hooks_fn` supplies per-denoising-step interventions; it receives the
/// current timestep and the episode mask stream.
pub struct ModelPolicy<'a> {
    pub model: &'a PolicyModel,
    pub normalizer: &'a Normalizer,
    pub sched: &'a NoiseSchedule,
    pub scfg: SamplerConfig,
    #[allow(clippy::type_complexity)]
    pub hooks_fn: Option<Box<dyn FnMut(usize, &mut Rng) -> Result<ForwardHooks> + 'a>>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(
        model: &'a PolicyModel,
        normalizer: &'a Normalizer,
        sched: &'a NoiseSchedule,
        scfg: SamplerConfig,
    ) -> Self {
        ModelPolicy {
            model,
            normalizer,
            sched,
            scfg,
            hooks_fn: None,
        }
    }
}

impl RolloutPolicy for ModelPolicy<'_> {
    fn window_len(&self) -> usize {
        self.model.cfg.n_obs
    }

    fn plan(
        &mut self,
        _state: &EnvState,
        window: &[Observation],
        streams: &mut EpisodeStreams,
    ) -> Result<Tensor> {
        let normalized: Vec<Observation> = window
            .iter()
            .map(|o| {
                Ok(Observation {
                    points: o.points.clone(),
                    proprio: self.normalizer.proprio.normalize(&o.proprio)?,
                })
            })
            .collect::<Result<_>>()?;
        let cond = self.model.encode_obs(&normalized)?;

        let EpisodeStreams {
            init_noise,
            vr,
            mask,
            ..
        } = streams;
        let mut bound_hooks;
        let step_hooks: Option<&mut dyn FnMut(usize) -> Result<ForwardHooks>> =
            match &mut self.hooks_fn {
                Some(f) => {
                    bound_hooks = |t: usize| f(t, &mut *mask);
                    Some(&mut bound_hooks)
                }
                None => None,
            };
        let traj = sample_trajectory(
            self.model,
            &self.model.store,
            &cond,
            &self.scfg,
            self.sched,
            init_noise,
            Some(vr),
            step_hooks,
        )?;
        self.normalizer.action.denormalize(&traj.actions)
    }
}

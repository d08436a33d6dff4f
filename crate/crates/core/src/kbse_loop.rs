//! The safe-exploration loop: rollout, barrier synthesis, shielded training
//! and periodic recertification.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::buffer::{ReplayBuffer, Transition};
use crate::agent::ddpg::{DdpgAgent, DdpgConfig};
use crate::barrier::{compute_bc, BarrierModel, BarrierProblem, Certificate};
use crate::cme::epsilon_bound;
use crate::envs::{make_env, EnvModel, DEFAULT_NOISE_SIGMA};
use crate::error::{KbseError, Result};
use crate::kernel::{median_bandwidth, KernelSpec};
use crate::shield::{fit_local_dynamics, safe_action, ShieldConfig, ShieldOutcome};

/// Number of `rho_0` draws used for `eta`.
pub const INITIAL_STATE_SAMPLES: usize = 256;
/// Number of unsafe-boundary states added to the unsafe samples for `nu`.
pub const BOUNDARY_SAMPLES: usize = 256;
/// Number of uniformly sampled states added to the candidate set for `c`.
pub const CANDIDATE_STATE_SAMPLES: usize = 512;
/// Number of uniformly sampled actions in the candidate set for `c`.
pub const CANDIDATE_ACTION_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Training horizon `T_h` in environment steps (after the initial rollout).
    pub horizon: usize,
    pub epoch_length: usize,
    /// Defaults to the environment's episode length.
    pub episode_length: Option<usize>,
    /// Barrier sample size `N`.
    pub barrier_sample_size: usize,
    pub zeta: f64,
    pub kernel_bound_c: f64,
    /// Also shield when the predicted successor would exceed `nu`.
    pub preemptive_shield: bool,
    /// Safety horizon `T` of the certificate; defaults to the episode length.
    pub safety_horizon: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            horizon: 50_000,
            epoch_length: 10_000,
            episode_length: None,
            barrier_sample_size: 500,
            zeta: 1e-5,
            kernel_bound_c: 1.0,
            preemptive_shield: false,
            safety_horizon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// State bandwidth; median heuristic on each barrier sample when absent.
    pub bandwidth_state: Option<f64>,
    pub bandwidth_state_action: Option<f64>,
    /// Embedding ridge constant `lambda` (applied as `lambda N`).
    pub regularization_lambda: f64,
    /// Ridge constant of the barrier fit.
    pub ridge_lambda: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { bandwidth_state: None, bandwidth_state_action: None, regularization_lambda: 1e-3, ridge_lambda: 1e-3 }
    }
}

/// Complete description of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub env: EnvConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub policy: DdpgConfig,
    #[serde(default)]
    pub shield: ShieldConfig,
}

impl RunConfig {
    pub fn new(env: &str) -> Self {
        Self {
            seed: 0,
            env: EnvConfig { name: env.to_string(), noise_sigma: DEFAULT_NOISE_SIGMA },
            training: TrainingConfig::default(),
            kernel: KernelConfig::default(),
            policy: DdpgConfig::default(),
            shield: ShieldConfig::default(),
        }
    }

    pub fn make_env(&self) -> Result<EnvModel> {
        let mut env = make_env(&self.env.name, self.env.noise_sigma, self.seed)?;
        if let Some(len) = self.training.episode_length {
            env.episode_length = len;
        }
        env.spec.horizon_t = self.training.safety_horizon.unwrap_or(env.episode_length);
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KbseError::Config(m));
        let env = self.make_env()?;
        let t = &self.training;
        if env.episode_length == 0 {
            return bad("training.episode_length must be positive".into());
        }
        if t.epoch_length == 0 || t.epoch_length % env.episode_length != 0 {
            return bad(format!(
                "training.epoch_length ({}) must be a positive multiple of the episode length ({})",
                t.epoch_length, env.episode_length
            ));
        }
        if t.barrier_sample_size < 2 {
            return bad("training.barrier_sample_size must be at least 2".into());
        }
        if !(t.zeta > 0.0 && t.zeta < 1.0) {
            return bad(format!("training.zeta must lie in (0, 1), got {}", t.zeta));
        }
        if !(t.kernel_bound_c > 0.0) {
            return bad("training.kernel_bound_c must be positive".into());
        }
        if t.safety_horizon == Some(0) {
            return bad("training.safety_horizon must be positive".into());
        }
        let k = &self.kernel;
        for (name, v) in [("kernel.bandwidth_state", k.bandwidth_state), ("kernel.bandwidth_state_action", k.bandwidth_state_action)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        if !(k.regularization_lambda >= 0.0) || !(k.ridge_lambda > 0.0) {
            return bad("kernel.regularization_lambda must be >= 0 and kernel.ridge_lambda > 0".into());
        }
        self.policy.validate().map_err(|e| KbseError::Config(format!("policy: {e}")))?;
        self.shield.validate().map_err(|e| KbseError::Config(format!("shield: {e}")))?;
        Ok(())
    }
}

/// One finished episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub start_step: usize,
    pub reward: f64,
    /// Number of unsafe steps.
    pub cost: usize,
    pub length: usize,
    pub shield_interventions: usize,
    pub terminal: bool,
}

/// Barrier constants after one (re)certification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub sample_size: usize,
    pub fitted: bool,
    /// The new barrier replaced the previous one.
    pub accepted: bool,
    pub eta: Option<f64>,
    pub nu: Option<f64>,
    pub c: Option<f64>,
    pub c_minmax: Option<f64>,
    pub b_bar: Option<f64>,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShieldCounts {
    pub unchanged: usize,
    pub projected: usize,
    pub backtracked: usize,
    pub fallback: usize,
    /// Unsafe steps where no valid barrier was available.
    pub unshielded: usize,
}

impl ShieldCounts {
    fn record(&mut self, outcome: ShieldOutcome) {
        match outcome {
            ShieldOutcome::Unchanged => self.unchanged += 1,
            ShieldOutcome::Projected => self.projected += 1,
            ShieldOutcome::Backtracked { .. } => self.backtracked += 1,
            ShieldOutcome::Fallback { .. } => self.fallback += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: Vec<EpisodeRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Training steps at which the state was unsafe.
    pub violation_steps: Vec<usize>,
    pub shield: ShieldCounts,
    pub steps: usize,
    pub horizon: usize,
    pub skipped_updates: u64,
    /// Excluded from the metrics files so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunMetrics {
    pub fn total_violations(&self) -> usize {
        self.violation_steps.len()
    }

    /// Step below which 90% of the violations occurred, as a percentage of the
    /// training horizon (nearest-rank percentile). `None` without violations.
    pub fn violation_percentile_pct(&self, pct: f64) -> Option<f64> {
        if self.violation_steps.is_empty() || self.horizon == 0 {
            return None;
        }
        let mut v = self.violation_steps.clone();
        v.sort_unstable();
        let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        Some(100.0 * (v[rank - 1] + 1) as f64 / self.horizon as f64)
    }

    /// One JSON object per episode, then one per epoch, each tagged by `record`.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "snake_case")]
        enum Line<'a> {
            Episode(&'a EpisodeRecord),
            Epoch(&'a EpochRecord),
        }
        let mut out = String::new();
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(&Line::Episode(e))?);
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&Line::Epoch(e))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub agent: DdpgAgent,
    /// Latest valid barrier, if any was ever certified.
    pub barrier: Option<BarrierModel>,
    pub metrics: RunMetrics,
    pub buffer: ReplayBuffer,
    pub env: EnvModel,
    pub interrupted: bool,
}

impl RunOutput {
    pub fn certificate(&self) -> Option<Certificate> {
        self.barrier.as_ref().map(Certificate::from_model)
    }
}

/// Independent RNG streams derived from one seed.
struct Streams {
    env: ChaCha8Rng,
    policy: ChaCha8Rng,
    sample: ChaCha8Rng,
    shield: ChaCha8Rng,
    init: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { env: stream(1), policy: stream(2), sample: stream(3), shield: stream(4), init: stream(5) }
    }
}

/// `epsilon_bound(n, C, zeta)`.
pub fn update_epsilon(n: usize, kernel_bound_c: f64, zeta: f64) -> Result<f64> {
    epsilon_bound(n, kernel_bound_c, zeta)
}

/// Recomputes `b_bar = ||B||` from the barrier's own expansion.
pub fn update_upper_bound(barrier: &BarrierModel) -> Result<f64> {
    barrier.rkhs_norm()
}

/// Runs the exploring policy until at least `min_transitions` were collected,
/// resetting at episode ends.
pub fn initial_rollout<R: Rng + ?Sized>(
    env: &EnvModel,
    agent: &DdpgAgent,
    min_transitions: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(min_transitions);
    let mut s = env.reset(rng);
    let mut len = 0;
    while out.len() < min_transitions {
        let a = agent.act(&s, true, rng);
        let step = env.step(&s, &a, rng)?;
        let mut t = Transition::new(s, a, step.reward, step.s_plus.clone());
        t.terminal = step.terminal;
        out.push(t);
        len += 1;
        if step.terminal || len >= env.episode_length {
            s = env.reset(rng);
            len = 0;
        } else {
            s = step.s_plus;
        }
    }
    Ok(out)
}

/// Builds the environment-dependent candidate sets for barrier synthesis.
pub fn barrier_problem<R: Rng + ?Sized>(env: &EnvModel, ridge_lambda: f64, zeta: f64, rng: &mut R) -> BarrierProblem {
    let initial_states = (0..INITIAL_STATE_SAMPLES).map(|_| env.reset(rng)).collect();
    let boundary_states = (0..BOUNDARY_SAMPLES)
        .filter_map(|_| {
            let base = env.sample_state(rng);
            env.spec.boundary_sample(&base, rng)
        })
        .collect();
    let candidate_states = (0..CANDIDATE_STATE_SAMPLES).map(|_| env.sample_state(rng)).collect();
    let candidate_actions = (0..CANDIDATE_ACTION_SAMPLES).map(|_| env.action_box.sample(rng)).collect();
    BarrierProblem {
        spec: env.spec.clone(),
        initial_states,
        boundary_states,
        candidate_states,
        candidate_actions,
        ridge_lambda,
        zeta,
    }
}

/// Kernel for a barrier sample: configured bandwidths, or the median heuristic.
pub fn kernel_for_sample<R: Rng + ?Sized>(config: &KernelConfig, kernel_bound_c: f64, sample: &[Transition], rng: &mut R) -> Result<KernelSpec> {
    let bw_s = match config.bandwidth_state {
        Some(b) => b,
        None => median_bandwidth(&sample.iter().map(|t| t.s.clone()).collect::<Vec<_>>(), rng)?,
    };
    let bw_sa = match config.bandwidth_state_action {
        Some(b) => b,
        None => median_bandwidth(&sample.iter().map(Transition::state_action).collect::<Vec<_>>(), rng)?,
    };
    let mut k = KernelSpec::new(bw_s, bw_sa, config.regularization_lambda)?;
    k.kernel_bound_c = kernel_bound_c;
    Ok(k)
}

struct Synthesis<'a> {
    config: &'a RunConfig,
    problem: BarrierProblem,
    epsilon: f64,
}

impl Synthesis<'_> {
    /// Samples `N` transitions and runs `compute_bc`. `Ok(None)` when the
    /// sample has no unsafe (or no safe) states.
    fn fit(&self, buffer: &ReplayBuffer, agent: &DdpgAgent, rng: &mut ChaCha8Rng) -> Result<(Option<BarrierModel>, usize)> {
        let n = self.config.training.barrier_sample_size;
        let sample = buffer.sample_data(n, rng)?;
        let kernel = kernel_for_sample(&self.config.kernel, self.config.training.kernel_bound_c, &sample, rng)?;
        let policy = |s: &[f64]| agent.mean_action(s);
        let mut resample = || buffer.sample_data(n, rng).ok();
        match compute_bc(&self.problem, &sample, &kernel, self.epsilon, &policy, &mut resample) {
            Ok(m) => Ok((Some(m), sample.len())),
            Err(KbseError::NoUnsafeSamples) | Err(KbseError::NoSafeSamples) => Ok((None, sample.len())),
            Err(e) => Err(e),
        }
    }
}

fn epoch_record(epoch: usize, step: usize, sample_size: usize, epsilon: f64, fitted: Option<&BarrierModel>, accepted: bool) -> EpochRecord {
    EpochRecord {
        epoch,
        step,
        sample_size,
        fitted: fitted.is_some(),
        accepted,
        eta: fitted.map(|m| m.eta),
        nu: fitted.map(|m| m.nu),
        c: fitted.map(|m| m.c),
        c_minmax: fitted.map(|m| m.c_minmax),
        b_bar: fitted.map(|m| m.b_bar),
        epsilon,
        delta: fitted.filter(|m| m.valid).map(|m| m.delta),
        valid: fitted.is_some_and(|m| m.valid),
    }
}

/// Runs the full safe-exploration loop.
pub fn run_kbse(config: &RunConfig) -> Result<RunOutput> {
    run_kbse_until(config, &AtomicBool::new(false))
}

/// As [`run_kbse`], returning early (with `interrupted = true`) once `stop` is set.
pub fn run_kbse_until(config: &RunConfig, stop: &AtomicBool) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let env = config.make_env()?;
    let mut rng = Streams::new(config.seed);
    let mut agent = DdpgAgent::new(env.state_dim, env.action_box.clone(), config.policy.clone(), &mut rng.init)?;
    let n = config.training.barrier_sample_size;
    let horizon = config.training.horizon;

    let mut buffer = ReplayBuffer::new();
    buffer.extend(initial_rollout(&env, &agent, n, &mut rng.env)?);

    let mut synthesis = Synthesis {
        config,
        problem: barrier_problem(&env, config.kernel.ridge_lambda, config.training.zeta, &mut rng.init),
        epsilon: update_epsilon(n, config.training.kernel_bound_c, config.training.zeta)?,
    };
    let mut metrics = RunMetrics { horizon, ..RunMetrics::default() };

    let (fitted, size) = synthesis.fit(&buffer, &agent, &mut rng.sample)?;
    let mut barrier = fitted.clone().filter(|m| m.valid);
    metrics.epochs.push(epoch_record(0, 0, size, synthesis.epsilon, fitted.as_ref(), barrier.is_some()));
    if fitted.is_none() {
        log::warn!("initial rollout has no unsafe samples; running unshielded until it does");
    }

    let mut interrupted = false;
    let mut s = env.reset(&mut rng.env);
    let mut ep = EpisodeRecord { episode: 0, start_step: 0, reward: 0.0, cost: 0, length: 0, shield_interventions: 0, terminal: false };
    let mut epsilon = synthesis.epsilon;
    for t in 0..horizon {
        if stop.load(Ordering::Relaxed) {
            interrupted = true;
            break;
        }
        let mut a = agent.act(&s, true, &mut rng.policy);
        let unsafe_now = env.is_unsafe(&s);
        if unsafe_now {
            metrics.violation_steps.push(t);
            ep.cost += 1;
        }
        if let Some(b) = barrier.as_ref() {
            let trigger = unsafe_now
                || (config.training.preemptive_shield && predicted_violation(b, &buffer, &s, &a, &config.shield)?);
            if trigger {
                let dynamics = fit_local_dynamics(buffer.recent(config.shield.window_h), config.shield.window_h)?;
                let decision = safe_action(b, &dynamics, &s, &a, &env.action_box, &config.shield, &mut rng.shield)?;
                metrics.shield.record(decision.outcome);
                ep.shield_interventions += 1;
                a = decision.action;
            }
        } else if unsafe_now {
            metrics.shield.unshielded += 1;
        }

        let step = env.step(&s, &a, &mut rng.env)?;
        let mut tr = Transition::new(s.clone(), a, step.reward, step.s_plus.clone());
        tr.terminal = step.terminal;
        buffer.push(tr);
        agent.update_from_buffer(&buffer, &mut rng.sample)?;
        ep.reward += step.reward;
        ep.length += 1;
        metrics.steps = t + 1;
        s = step.s_plus;

        if step.terminal || ep.length >= env.episode_length {
            ep.terminal = step.terminal;
            let next = EpisodeRecord {
                episode: ep.episode + 1,
                start_step: t + 1,
                reward: 0.0,
                cost: 0,
                length: 0,
                shield_interventions: 0,
                terminal: false,
            };
            metrics.episodes.push(std::mem::replace(&mut ep, next));
            s = env.reset(&mut rng.env);
            let w = buffer.sample_data(n, &mut rng.sample)?;
            epsilon = update_epsilon(w.len(), config.training.kernel_bound_c, config.training.zeta)?;
            if let Some(b) = barrier.as_mut() {
                b.b_bar = update_upper_bound(b)?;
            }
        }

        if (t + 1) % config.training.epoch_length == 0 {
            synthesis.epsilon = epsilon;
            let (fitted, size) = synthesis.fit(&buffer, &agent, &mut rng.sample)?;
            let accepted = fitted.as_ref().is_some_and(|m| m.valid);
            if accepted {
                barrier = fitted.clone();
            } else {
                log::info!("epoch {}: barrier not certified, keeping the previous one", (t + 1) / config.training.epoch_length);
            }
            metrics.epochs.push(epoch_record((t + 1) / config.training.epoch_length, t + 1, size, epsilon, fitted.as_ref(), accepted));
            log::info!(
                "step {}: violations {} delta {:?}",
                t + 1,
                metrics.total_violations(),
                barrier.as_ref().map(|b| b.delta)
            );
        }
    }
    metrics.skipped_updates = agent.skipped_updates();
    metrics.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(RunOutput { agent, barrier, metrics, buffer, env, interrupted })
}

fn predicted_violation(b: &BarrierModel, buffer: &ReplayBuffer, s: &[f64], a: &[f64], shield: &ShieldConfig) -> Result<bool> {
    let dynamics = fit_local_dynamics(buffer.recent(shield.window_h), shield.window_h)?;
    Ok(crate::barrier::eval_barrier(b, &dynamics.predict(s, a)?)? > b.nu)
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub reward: f64,
    pub cost: usize,
    pub length: usize,
    pub shield_interventions: usize,
}

impl EvalEpisode {
    pub fn is_unsafe(&self) -> bool {
        self.cost > 0
    }
}

/// Runs one deterministic-policy episode, shielded by `barrier` when given.
/// Local dynamics are fitted on the episode's own transitions. Episode `index`
/// uses its own RNG stream so episodes can run in any order.
pub fn eval_episode(
    env: &EnvModel,
    agent: &DdpgAgent,
    barrier: Option<&BarrierModel>,
    shield: &ShieldConfig,
    seed: u64,
    index: u64,
) -> Result<EvalEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000 + index);
    let mut s = env.reset(&mut rng);
    let mut out = EvalEpisode { reward: 0.0, cost: 0, length: 0, shield_interventions: 0 };
    let mut history: Vec<Transition> = Vec::new();
    let mut terminal = false;
    while out.length < env.episode_length && !terminal {
        let mut a = agent.act(&s, false, &mut rng);
        if env.is_unsafe(&s) {
            out.cost += 1;
            if let (Some(b), false) = (barrier.filter(|b| b.valid), history.is_empty()) {
                let dynamics = fit_local_dynamics(&history, shield.window_h)?;
                a = safe_action(b, &dynamics, &s, &a, &env.action_box, shield, &mut rng)?.action;
                out.shield_interventions += 1;
            }
        }
        let step = env.step(&s, &a, &mut rng)?;
        out.reward += step.reward;
        out.length += 1;
        terminal = step.terminal;
        history.push(Transition::new(s, a, step.reward, step.s_plus.clone()));
        s = step.s_plus;
    }
    Ok(out)
}

/// Aggregate over evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_reward: Option<f64>,
    pub mean_cost: Option<f64>,
    pub mean_length: Option<f64>,
    pub unsafe_episodes: usize,
    pub unsafe_frequency: Option<f64>,
    /// Wilson score 95% interval for the unsafe-episode probability.
    pub unsafe_interval_95: Option<[f64; 2]>,
}

/// Wilson score interval for `k` successes in `n` trials at normal quantile `z`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Option<[f64; 2]> {
    if n == 0 {
        return None;
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Some([(center - half).max(0.0), (center + half).min(1.0)])
}

impl EvalReport {
    pub fn from_episodes(eps: &[EvalEpisode]) -> Self {
        let n = eps.len();
        let mean = |f: &dyn Fn(&EvalEpisode) -> f64| (n > 0).then(|| eps.iter().map(f).sum::<f64>() / n as f64);
        let unsafe_episodes = eps.iter().filter(|e| e.is_unsafe()).count();
        Self {
            episodes: n,
            mean_reward: mean(&|e| e.reward),
            mean_cost: mean(&|e| e.cost as f64),
            mean_length: mean(&|e| e.length as f64),
            unsafe_episodes,
            unsafe_frequency: (n > 0).then(|| unsafe_episodes as f64 / n as f64),
            unsafe_interval_95: wilson_interval(unsafe_episodes, n, 1.959_963_984_540_054),
        }
    }
}

//! Deterministic actor-critic (DDPG-style) learner.
//!
//! The actor maps a state to `mid + half * tanh(net(s))`, so its output always
//! lies in the action box. The critic regresses the one-step TD target
//! `r + gamma * (1 - terminal) * Q'(s+, mu'(s+))` computed with Polyak-averaged
//! target copies.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, Transition};
use super::network::{Adam, ForwardCache, Mlp};
use crate::error::{check_dim, KbseError, Result};
use crate::space::BoxBounds;

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount_gamma: f64,
    pub polyak_tau: f64,
    pub batch_size: usize,
    /// Standard deviation of the Gaussian exploration noise, in action units.
    pub exploration_sigma: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            discount_gamma: 0.99,
            polyak_tau: 0.005,
            batch_size: 128,
            exploration_sigma: 0.1,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KbseError::InvalidArgument(m));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden layer sizes must be positive, got {:?}", self.hidden));
        }
        if !(0.0..1.0).contains(&self.discount_gamma) {
            return bad(format!("discount_gamma must lie in [0, 1), got {}", self.discount_gamma));
        }
        if !(0.0..=1.0).contains(&self.polyak_tau) {
            return bad(format!("polyak_tau must lie in [0, 1], got {}", self.polyak_tau));
        }
        if !(self.actor_lr >= 0.0) || !(self.critic_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.exploration_sigma >= 0.0) {
            return bad(format!("exploration_sigma must be non-negative, got {}", self.exploration_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// The step was skipped because a gradient was not finite.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpgAgent {
    pub config: DdpgConfig,
    pub action_box: BoxBounds,
    state_dim: usize,
    actor: Mlp,
    critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    skipped_updates: u64,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

fn columns(rows: usize, items: impl Iterator<Item = Vec<f64>>) -> DMatrix<f64> {
    let data: Vec<f64> = items.flatten().collect();
    let cols = data.len() / rows.max(1);
    DMatrix::from_column_slice(rows, cols, &data)
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_box: BoxBounds, config: DdpgConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 || action_box.dim() == 0 {
            return Err(KbseError::InvalidArgument("state and action dimensions must be positive".into()));
        }
        let q = action_box.dim();
        let actor = Mlp::new(&layer_sizes(state_dim, &config.hidden, q), 3e-3, rng);
        let critic = Mlp::new(&layer_sizes(state_dim + q, &config.hidden, 1), 3e-3, rng);
        Ok(Self::from_networks(state_dim, action_box, config, actor, critic))
    }

    /// An agent whose networks are all zero; it always outputs the box center.
    pub fn zeroed(state_dim: usize, action_box: BoxBounds, config: DdpgConfig) -> Result<Self> {
        config.validate()?;
        let q = action_box.dim();
        let actor = Mlp::zeros(&layer_sizes(state_dim, &config.hidden, q));
        let critic = Mlp::zeros(&layer_sizes(state_dim + q, &config.hidden, 1));
        Ok(Self::from_networks(state_dim, action_box, config, actor, critic))
    }

    fn from_networks(state_dim: usize, action_box: BoxBounds, config: DdpgConfig, actor: Mlp, critic: Mlp) -> Self {
        let actor_opt = Adam::new(actor.num_params(), config.actor_lr);
        let critic_opt = Adam::new(critic.num_params(), config.critic_lr);
        Self {
            state_dim,
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            action_box,
            config,
            skipped_updates: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    pub fn actor_params(&self) -> Vec<f64> {
        self.actor.params()
    }

    pub fn set_actor_params(&mut self, theta: &[f64]) -> Result<()> {
        self.actor.set_params(theta)
    }

    pub fn critic_params(&self) -> Vec<f64> {
        self.critic.params()
    }

    pub fn set_critic_params(&mut self, theta: &[f64]) -> Result<()> {
        self.critic.set_params(theta)
    }

    fn squash(&self, net_out: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mid = self.action_box.center();
        let half = self.action_box.half_width();
        let t = net_out.map(f64::tanh);
        let a = DMatrix::from_fn(t.nrows(), t.ncols(), |i, j| mid[i] + half[i] * t[(i, j)]);
        (a, t)
    }

    fn actor_forward(&self, net: &Mlp, states: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, ForwardCache) {
        let (out, cache) = net.forward(states);
        let (a, t) = self.squash(&out);
        (a, t, cache)
    }

    /// Deterministic policy output.
    pub fn mean_action(&self, s: &[f64]) -> Vec<f64> {
        let (a, _, _) = self.actor_forward(&self.actor, &DMatrix::from_column_slice(s.len(), 1, s));
        a.as_slice().to_vec()
    }

    /// Policy output plus Gaussian noise, before clipping to the box.
    pub fn act_unclipped<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Vec<f64> {
        let mut a = self.mean_action(s);
        if self.config.exploration_sigma > 0.0 {
            let noise = Normal::new(0.0, self.config.exploration_sigma).expect("validated sigma");
            a.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        a
    }

    /// Action for `s`; with `explore`, Gaussian noise is added before clipping.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], explore: bool, rng: &mut R) -> Vec<f64> {
        let a = if explore { self.act_unclipped(s, rng) } else { self.mean_action(s) };
        self.action_box.clip(&a)
    }

    fn critic_input(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(states.nrows() + actions.nrows(), states.ncols());
        x.rows_mut(0, states.nrows()).copy_from(states);
        x.rows_mut(states.nrows(), actions.nrows()).copy_from(actions);
        x
    }

    fn batch_matrices(&self, batch: &[Transition]) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        for t in batch {
            check_dim(self.state_dim, t.s.len())?;
            check_dim(self.state_dim, t.s_plus.len())?;
            check_dim(self.action_dim(), t.a.len())?;
        }
        let s = columns(self.state_dim, batch.iter().map(|t| t.s.clone()));
        let a = columns(self.action_dim(), batch.iter().map(|t| t.a.clone()));
        let sp = columns(self.state_dim, batch.iter().map(|t| t.s_plus.clone()));
        Ok((s, a, sp))
    }

    /// TD targets from the target networks.
    fn td_targets(&self, batch: &[Transition], s_plus: &DMatrix<f64>) -> Vec<f64> {
        let (a_next, _, _) = self.actor_forward(&self.actor_target, s_plus);
        let (q_next, _) = self.critic_target.forward(&self.critic_input(s_plus, &a_next));
        batch
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let cont = if t.terminal { 0.0 } else { 1.0 };
                t.r + self.config.discount_gamma * cont * q_next[(0, j)]
            })
            .collect()
    }

    /// Mean squared TD error and its gradient with respect to the critic parameters.
    pub fn critic_loss_and_grad(&self, batch: &[Transition]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(KbseError::InvalidArgument("empty batch".into()));
        }
        let (s, a, sp) = self.batch_matrices(batch)?;
        let y = self.td_targets(batch, &sp);
        let (q, cache) = self.critic.forward(&self.critic_input(&s, &a));
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let d_out = DMatrix::from_fn(1, batch.len(), |_, j| {
            let e = q[(0, j)] - y[j];
            loss += e * e / n;
            2.0 * e / n
        });
        let (grad, _) = self.critic.backward(&cache, &d_out);
        Ok((loss, grad))
    }

    /// `-mean Q(s, mu(s))` and its gradient with respect to the actor parameters.
    pub fn actor_loss_and_grad(&self, states: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if states.is_empty() {
            return Err(KbseError::InvalidArgument("empty batch".into()));
        }
        for s in states {
            check_dim(self.state_dim, s.len())?;
        }
        let s = columns(self.state_dim, states.iter().cloned());
        let (a, t, actor_cache) = self.actor_forward(&self.actor, &s);
        let (q, critic_cache) = self.critic.forward(&self.critic_input(&s, &a));
        let n = states.len() as f64;
        let loss = -q.iter().sum::<f64>() / n;
        let d_q = DMatrix::from_element(1, states.len(), -1.0 / n);
        let (_, d_input) = self.critic.backward(&critic_cache, &d_q);
        let half = self.action_box.half_width();
        let q_dim = self.action_dim();
        let d_net = DMatrix::from_fn(q_dim, states.len(), |i, j| {
            d_input[(self.state_dim + i, j)] * half[i] * (1.0 - t[(i, j)] * t[(i, j)])
        });
        let (grad, _) = self.actor.backward(&actor_cache, &d_net);
        Ok((loss, grad))
    }

    /// One critic step, one actor step and the Polyak target update.
    pub fn update(&mut self, batch: &[Transition]) -> Result<UpdateStats> {
        let (critic_loss, critic_grad) = self.critic_loss_and_grad(batch)?;
        let states: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
        if !critic_loss.is_finite() || critic_grad.iter().any(|g| !g.is_finite()) {
            return Ok(self.skip("critic"));
        }
        let mut theta = self.critic.params();
        self.critic_opt.step(&mut theta, &critic_grad);
        let backup = self.critic.clone();
        self.critic.set_params(&theta)?;

        let (actor_loss, actor_grad) = self.actor_loss_and_grad(&states)?;
        if !actor_loss.is_finite() || actor_grad.iter().any(|g| !g.is_finite()) {
            self.critic = backup;
            return Ok(self.skip("actor"));
        }
        let mut theta = self.actor.params();
        self.actor_opt.step(&mut theta, &actor_grad);
        self.actor.set_params(&theta)?;

        let tau = self.config.polyak_tau;
        self.actor_target.polyak_update(&self.actor, tau);
        self.critic_target.polyak_update(&self.critic, tau);
        Ok(UpdateStats { critic_loss, actor_loss, skipped: false })
    }

    fn skip(&mut self, which: &str) -> UpdateStats {
        self.skipped_updates += 1;
        log::warn!("non-finite {which} gradient: update skipped ({} so far)", self.skipped_updates);
        UpdateStats { critic_loss: f64::NAN, actor_loss: f64::NAN, skipped: true }
    }

    /// Samples a mini-batch from `buffer` and updates. Does nothing until the
    /// buffer holds at least one batch.
    pub fn update_from_buffer<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<Option<UpdateStats>> {
        if buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = buffer.sample_data(self.config.batch_size, rng)?;
        self.update(&batch).map(Some)
    }

    pub fn to_params(&self) -> PolicyParams {
        PolicyParams {
            version: POLICY_FORMAT_VERSION,
            state_dim: self.state_dim,
            action_low: self.action_box.low.clone(),
            action_high: self.action_box.high.clone(),
            config: self.config.clone(),
            theta: self.actor.params(),
            critic_theta: self.critic.params(),
        }
    }

    pub fn from_params(params: &PolicyParams) -> Result<Self> {
        let field_err = |field: &str, reason: String| KbseError::Checkpoint { field: field.into(), reason };
        if params.version != POLICY_FORMAT_VERSION {
            return Err(field_err("version", format!("unsupported version {}", params.version)));
        }
        params.config.validate().map_err(|e| field_err("config", e.to_string()))?;
        let action_box = BoxBounds::new(params.action_low.clone(), params.action_high.clone())
            .map_err(|e| field_err("action_low", e.to_string()))?;
        let q = action_box.dim();
        let actor = Mlp::from_params(&layer_sizes(params.state_dim, &params.config.hidden, q), &params.theta)
            .map_err(|e| field_err("theta", e.to_string()))?;
        let critic = Mlp::from_params(&layer_sizes(params.state_dim + q, &params.config.hidden, 1), &params.critic_theta)
            .map_err(|e| field_err("critic_theta", e.to_string()))?;
        if !actor.is_finite() {
            return Err(field_err("theta", "non-finite parameter".into()));
        }
        if !critic.is_finite() {
            return Err(field_err("critic_theta", "non-finite parameter".into()));
        }
        Ok(Self::from_networks(params.state_dim, action_box, params.config.clone(), actor, critic))
    }
}

/// Serializable policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub version: u32,
    pub state_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub config: DdpgConfig,
    /// Flat actor parameters.
    pub theta: Vec<f64>,
    pub critic_theta: Vec<f64>,
}

impl PolicyParams {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KbseError::Checkpoint { field: "policy".into(), reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> DdpgAgent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DdpgConfig { hidden: vec![3, 3], ..DdpgConfig::default() };
        let mut agent = DdpgAgent::new(2, BoxBounds::symmetric(&[2.0]), cfg, &mut rng).unwrap();
        // Larger output weights than the default init so gradients are not tiny.
        let mut th = agent.actor_params();
        th.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        agent.set_actor_params(&th).unwrap();
        let mut th = agent.critic_params();
        th.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        agent.set_critic_params(&th).unwrap();
        agent
    }

    #[test]
    fn zero_network_outputs_box_center() {
        let agent = DdpgAgent::zeroed(3, BoxBounds::symmetric(&[2.0]), DdpgConfig::default()).unwrap();
        assert_eq!(agent.mean_action(&[0.3, -0.1, 5.0]), vec![0.0]);
    }

    #[test]
    fn act_is_deterministic_without_exploration() {
        let agent = toy(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = agent.act(&[0.1, 0.2], false, &mut rng);
        assert_eq!(a, agent.act(&[0.1, 0.2], false, &mut rng));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DdpgConfig { actor_lr: 0.0, critic_lr: 0.0, hidden: vec![8], ..DdpgConfig::default() };
        let mut agent = DdpgAgent::new(2, BoxBounds::symmetric(&[1.0]), cfg, &mut rng).unwrap();
        let before = (agent.actor_params(), agent.critic_params());
        let batch: Vec<Transition> = (0..16)
            .map(|i| Transition::new(vec![i as f64 * 0.1, 0.0], vec![0.5], 1.0, vec![0.0, 0.1]))
            .collect();
        agent.update(&batch).unwrap();
        assert_eq!(before, (agent.actor_params(), agent.critic_params()));
    }

    #[test]
    fn critic_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DdpgConfig { discount_gamma: 0.0, hidden: vec![16, 16], ..DdpgConfig::default() };
        let mut agent = DdpgAgent::new(2, BoxBounds::symmetric(&[1.0]), cfg, &mut rng).unwrap();
        let t = Transition::new(vec![0.4, -0.2], vec![0.3], 0.0, vec![0.1, 0.1]);
        let mut th = agent.critic_params();
        th.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        agent.set_critic_params(&th).unwrap();
        let q = |ag: &DdpgAgent| ag.critic().predict(&t.state_action())[0].abs();
        let start = q(&agent);
        let batch = vec![t.clone(); 8];
        for _ in 0..300 {
            agent.update(&batch).unwrap();
        }
        assert!(q(&agent) < 0.05 * start.max(1e-3), "{} -> {}", start, q(&agent));
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = toy(4);
        let back = DdpgAgent::from_params(&PolicyParams::from_json(&agent.to_params().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(agent.mean_action(&[0.3, 0.3]), back.mean_action(&[0.3, 0.3]));
        let mut p = agent.to_params();
        p.theta.pop();
        let err = DdpgAgent::from_params(&p).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
    }
}

//! Stochastic classical-control benchmarks with their safety specifications.
//!
//! Dynamics follow the usual classic-control formulations. Each step adds
//! independent Gaussian noise and then clips to the state box.
//!
//! | env | state | action | unsafe | length |
//! |-----|-------|--------|--------|--------|
//! | `pendulum` | (cos θ, sin θ, θ̇) | torque in [-2, 2] | θ < -0.8 | 200 |
//! | `mountain_car` | (p, v) | force in [-1, 1] | p < -1.0 | 1000 |
//! | `inverted_pendulum` | (x, θ, ẋ, θ̇) | force in [-3, 3] | \|x\| > 0.3 | 1000 |

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barrier::{Constraint, Feature, SafetySpec};
use crate::error::{check_dim, KbseError, Result};
use crate::space::BoxBounds;

pub const ENV_NAMES: [&str; 3] = ["pendulum", "mountain_car", "inverted_pendulum"];

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    MountainCar,
    InvertedPendulum,
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(Self::Pendulum),
            "mountain_car" => Ok(Self::MountainCar),
            "inverted_pendulum" => Ok(Self::InvertedPendulum),
            other => Err(KbseError::InvalidArgument(format!(
                "unknown environment `{other}` (expected one of {})",
                ENV_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pendulum => "pendulum",
            Self::MountainCar => "mountain_car",
            Self::InvertedPendulum => "inverted_pendulum",
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub s_plus: Vec<f64>,
    pub reward: f64,
    /// Goal reached or failure; the episode must be reset.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvModel {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub state_box: BoxBounds,
    pub action_box: BoxBounds,
    pub noise_sigma: f64,
    pub episode_length: usize,
    pub spec: SafetySpec,
    pub seed: u64,
}

// Pendulum constants.
const PEND_DT: f64 = 0.05;
const PEND_G: f64 = 10.0;
const PEND_M: f64 = 1.0;
const PEND_L: f64 = 1.0;
const PEND_MAX_SPEED: f64 = 8.0;
const PEND_MAX_TORQUE: f64 = 2.0;
const PEND_INIT: f64 = 0.3;

// Mountain car constants.
const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL: f64 = 0.45;
const MC_POWER: f64 = 0.0015;

// Cart-pole constants.
const CP_GRAVITY: f64 = 9.8;
const CP_CART_MASS: f64 = 1.0;
const CP_POLE_MASS: f64 = 0.1;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_FORCE_PER_UNIT: f64 = 10.0 / 3.0;
const CP_TAU: f64 = 0.02;
const CP_MAX_ANGLE: f64 = 0.2;
const CP_INIT: f64 = 0.01;

/// Builds one of the built-in environments. `noise_sigma` is the standard
/// deviation of the additive transition noise on every physical coordinate.
pub fn make_env(name: &str, noise_sigma: f64, seed: u64) -> Result<EnvModel> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(KbseError::InvalidArgument(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let kind = EnvKind::parse(name)?;
    let env = match kind {
        EnvKind::Pendulum => EnvModel {
            kind,
            state_dim: 3,
            action_dim: 1,
            state_box: BoxBounds::symmetric(&[1.0, 1.0, PEND_MAX_SPEED]),
            action_box: BoxBounds::symmetric(&[PEND_MAX_TORQUE]),
            noise_sigma,
            episode_length: 200,
            spec: SafetySpec::new(
                vec![Constraint::Greater { feature: Feature::Angle { cos_index: 0, sin_index: 1 }, bound: -0.8 }],
                200,
            )?,
            seed,
        },
        EnvKind::MountainCar => EnvModel {
            kind,
            state_dim: 2,
            action_dim: 1,
            state_box: BoxBounds::new(vec![MC_MIN_POS, -MC_MAX_SPEED], vec![MC_MAX_POS, MC_MAX_SPEED])?,
            action_box: BoxBounds::symmetric(&[1.0]),
            noise_sigma,
            episode_length: 1000,
            spec: SafetySpec::new(
                vec![Constraint::Greater { feature: Feature::Coordinate { index: 0 }, bound: -1.0 }],
                1000,
            )?,
            seed,
        },
        EnvKind::InvertedPendulum => EnvModel {
            kind,
            state_dim: 4,
            action_dim: 1,
            state_box: BoxBounds::symmetric(&[1.0, PI / 2.0, 10.0, 10.0]),
            action_box: BoxBounds::symmetric(&[3.0]),
            noise_sigma,
            episode_length: 1000,
            spec: SafetySpec::new(
                vec![Constraint::AbsLess { feature: Feature::Coordinate { index: 0 }, bound: 0.3 }],
                1000,
            )?,
            seed,
        },
    };
    Ok(env)
}

/// True iff `s` violates at least one constraint of `spec`.
pub fn is_unsafe(spec: &SafetySpec, s: &[f64]) -> bool {
    spec.is_unsafe(s)
}

fn pendulum_obs(theta: f64, theta_dot: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin(), theta_dot]
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl EnvModel {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn is_unsafe(&self, s: &[f64]) -> bool {
        self.spec.is_unsafe(s)
    }

    /// Draws an initial state from the environment's start distribution.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => {
                pendulum_obs(rng.random_range(-PEND_INIT..=PEND_INIT), rng.random_range(-PEND_INIT..=PEND_INIT))
            }
            EnvKind::MountainCar => vec![rng.random_range(-0.6..=-0.4), 0.0],
            EnvKind::InvertedPendulum => (0..4).map(|_| rng.random_range(-CP_INIT..=CP_INIT)).collect(),
        }
    }

    /// Uniform sample over the reachable state space. For the pendulum the
    /// angle is drawn uniformly on the circle so samples lie on the
    /// (cos, sin) manifold.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => pendulum_obs(
                rng.random_range(-PI..PI),
                rng.random_range(-PEND_MAX_SPEED..=PEND_MAX_SPEED),
            ),
            _ => self.state_box.sample(rng),
        }
    }

    /// Advances the environment by one step.
    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<StepOutcome> {
        check_dim(self.state_dim, s.len())?;
        check_dim(self.action_dim, a.len())?;
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(KbseError::InvalidArgument("non-finite state or action".into()));
        }
        let a = self.action_box.clip(a);
        let noise = Normal::new(0.0, self.noise_sigma).expect("validated noise scale");
        let mut eps = || if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        let out = match self.kind {
            EnvKind::Pendulum => {
                let th = s[1].atan2(s[0]);
                let thdot = s[2];
                let u = a[0];
                let reward = -(angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u);
                let mut new_thdot = thdot
                    + (3.0 * PEND_G / (2.0 * PEND_L) * th.sin() + 3.0 / (PEND_M * PEND_L * PEND_L) * u) * PEND_DT;
                new_thdot = new_thdot.clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
                let new_th = th + new_thdot * PEND_DT + eps();
                let new_thdot = (new_thdot + eps()).clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
                StepOutcome { s_plus: pendulum_obs(new_th, new_thdot), reward, terminal: false }
            }
            EnvKind::MountainCar => {
                let force = a[0].clamp(-1.0, 1.0);
                let mut v = s[1] + force * MC_POWER - 0.0025 * (3.0 * s[0]).cos();
                v = v.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
                let mut p = (s[0] + v).clamp(MC_MIN_POS, MC_MAX_POS);
                if p == MC_MIN_POS && v < 0.0 {
                    v = 0.0;
                }
                p += eps();
                v += eps();
                let s_plus = self.state_box.clip(&[p, v]);
                let terminal = s_plus[0] >= MC_GOAL && s_plus[1] >= 0.0;
                let reward = -0.1 * force * force + if terminal { 100.0 } else { 0.0 };
                StepOutcome { s_plus, reward, terminal }
            }
            EnvKind::InvertedPendulum => {
                let (x, th, xdot, thdot) = (s[0], s[1], s[2], s[3]);
                let force = a[0] * CP_FORCE_PER_UNIT;
                let total_mass = CP_CART_MASS + CP_POLE_MASS;
                let pole_ml = CP_POLE_MASS * CP_HALF_LENGTH;
                let (sin, cos) = th.sin_cos();
                let temp = (force + pole_ml * thdot * thdot * sin) / total_mass;
                let th_acc = (CP_GRAVITY * sin - cos * temp)
                    / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_POLE_MASS * cos * cos / total_mass));
                let x_acc = temp - pole_ml * th_acc * cos / total_mass;
                let next = [
                    x + CP_TAU * xdot + eps(),
                    th + CP_TAU * thdot + eps(),
                    xdot + CP_TAU * x_acc + eps(),
                    thdot + CP_TAU * th_acc + eps(),
                ];
                let s_plus = self.state_box.clip(&next);
                let terminal = s_plus[1].abs() > CP_MAX_ANGLE;
                StepOutcome { s_plus, reward: 1.0, terminal }
            }
        };
        Ok(out)
    }
}

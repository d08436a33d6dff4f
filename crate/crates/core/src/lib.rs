//! Kernel-based safe exploration.
//!
//! A policy is trained on a stochastic control task while a barrier function,
//! represented as an RBF kernel expansion, is learned from the visited states.
//! The expected barrier change under the unknown dynamics is estimated with a
//! conditional mean embedding, robustified by an MMD ambiguity radius, and the
//! resulting constants bound the probability of reaching unsafe states within
//! a finite horizon. A shield projects actions when the system is unsafe.

pub mod agent;
pub mod barrier;
pub mod cme;
pub mod envs;
pub mod error;
pub mod kbse_loop;
pub mod kernel;
pub mod shield;
pub mod space;

pub use agent::buffer::{ReplayBuffer, Transition};
pub use barrier::{BarrierModel, Certificate, SafetySpec};
pub use cme::{CmeModel, MmdBounds};
pub use envs::{make_env, EnvModel};
pub use error::{KbseError, Result};
pub use kernel::{GramFactor, KernelSpec};

//! Off-policy learner used as the policy `pi_theta`: a replay buffer and a
//! deterministic actor-critic trained by explicit backpropagation.

pub mod buffer;
pub mod ddpg;
pub mod network;

pub use buffer::{ReplayBuffer, Transition};
pub use ddpg::{DdpgAgent, DdpgConfig, PolicyParams, UpdateStats};
pub use network::{Adam, Mlp};

//! A small reinforcement-learning laboratory for sparse-reward continuous
//! control from demonstrations.
//!
//! The crate is organized around six pieces:
//!
//! - [`nn`]: a from-scratch feedforward substrate (f64 MLPs, reverse-mode
//!   gradients, Adam, Polyak-averaged target copies, text checkpoints).
//! - [`env`]: a 2-D pointmass navigation MDP with a barrier/slit obstacle and
//!   a scripted proportional-controller demonstrator.
//! - [`replay`]: a trajectory-complete replay buffer that annotates every
//!   transition with its infinite-tail Monte Carlo return at insertion.
//! - [`targets`]: pure functions for every Q-target family used by the
//!   agents (one-step TD, Monte Carlo max, generalized Q estimation,
//!   lambda mixtures, critic-tail returns).
//! - [`agents`]: SAC and TD3 actor-critics (double-Q), a GQE variant of SAC,
//!   and behavior cloning, each optionally wrapped with the Monte Carlo
//!   max target.
//! - [`harness`]: seeded end-to-end training, evaluation, metrics CSV
//!   export, buffer diagnostics, and sensitivity sweeps.

pub mod agents;
pub mod env;
pub mod harness;
pub mod nn;
pub mod replay;
pub mod rngs;
pub mod targets;

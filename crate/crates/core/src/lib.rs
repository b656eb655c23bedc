//! Model imitation for model-based reinforcement learning.
//!
//! A transition model is trained to reproduce the discounted distribution of
//! real `(s, a, s')` triples by adversarial matching against a Wasserstein
//! critic, with an `l2` regression term as a regularizer. A policy is then
//! optimized on short synthetic rollouts from the learned model.
//!
//! The [`oracle`] module carries exact finite-MDP machinery (occupancy
//! measures by linear solve, optimal-transport distances) used to certify the
//! consistency and error-bound properties of the method on small instances.

pub mod config;
pub mod critic;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod orchestrator;
pub mod policy;
pub mod rng;
pub mod transition;

pub use error::{Error, Result};
pub use mdp::{EnvSpec, OccupancyEstimate, Source, Trajectory, TransitionTuple};
pub use rng::Rng;

//! Environments with known ground-truth dynamics.
//!
//! [`Task`] carries what the learner is allowed to know about an environment
//! (dimensions, the reward function, the termination rule). [`Env`] adds the
//! true dynamics. The inner training loops only ever see a `Task`, so they
//! cannot touch the real environment.

mod bandit;
mod cartpole;
mod pendulum;
pub mod tabular;

use std::cell::Cell;

use serde::{Deserialize, Serialize};

pub use bandit::{Bandit, BanditParams};
pub use cartpole::{Cartpole, CartpoleParams};
pub use pendulum::{Pendulum, PendulumParams};
pub use tabular::{make_random_mdp, TabularMDP, TabularPolicy};

use crate::error::{Error, Result};
use crate::mdp::EnvSpec;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Task {
    fn spec(&self) -> &EnvSpec;

    /// Known reward `r(s, a)`; actions are clipped to the action box first.
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;

    fn is_terminal(&self, state: &[f64]) -> bool;

    fn max_episode_length(&self) -> usize;
}

pub trait Env: Task {
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step>;
}

/// Continuous actions live in `[-1, 1]^action_dim`.
pub fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

pub(crate) fn check_dims(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<()> {
    if state.len() != spec.state_dim || action.len() != spec.action_dim {
        return Err(Error::input(format!(
            "expected state/action dims ({}, {}), got ({}, {})",
            spec.state_dim,
            spec.action_dim,
            state.len(),
            action.len()
        )));
    }
    Ok(())
}

/// Counts calls into the wrapped environment.
pub struct CountingEnv<'a> {
    inner: &'a dyn Env,
    steps: Cell<u64>,
    resets: Cell<u64>,
}

impl<'a> CountingEnv<'a> {
    pub fn new(inner: &'a dyn Env) -> Self {
        Self { inner, steps: Cell::new(0), resets: Cell::new(0) }
    }

    pub fn steps(&self) -> u64 {
        self.steps.get()
    }

    pub fn resets(&self) -> u64 {
        self.resets.get()
    }
}

impl Task for CountingEnv<'_> {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.inner.reward(state, action)
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        self.inner.is_terminal(state)
    }

    fn max_episode_length(&self) -> usize {
        self.inner.max_episode_length()
    }
}

impl Env for CountingEnv<'_> {
    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        self.resets.set(self.resets.get() + 1);
        self.inner.reset(rng)
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step> {
        self.steps.set(self.steps.get() + 1);
        self.inner.step(state, action, rng)
    }
}

/// Environment selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Pendulum(PendulumParams),
    Cartpole(CartpoleParams),
    Bandit(BanditParams),
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Pendulum(_) => "pendulum",
            EnvConfig::Cartpole(_) => "cartpole",
            EnvConfig::Bandit(_) => "bandit",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Env + Send + Sync>> {
        Ok(match self {
            EnvConfig::Pendulum(p) => Box::new(Pendulum::new(p.clone())?),
            EnvConfig::Cartpole(p) => Box::new(Cartpole::new(p.clone())?),
            EnvConfig::Bandit(p) => Box::new(Bandit::new(p.clone())?),
        })
    }
}

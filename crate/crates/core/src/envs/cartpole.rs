use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_dims, clip_action, Env, Step, Task};
use crate::error::{check_gamma, Error, Result};
use crate::mdp::{Diameter, EnvSpec};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub x_threshold: f64,
    pub theta_threshold: f64,
    /// Every state coordinate starts uniform on `[-init_box, init_box]`.
    pub init_box: f64,
    pub max_episode_length: usize,
    pub gamma: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            x_threshold: 2.4,
            theta_threshold: 12.0_f64.to_radians(),
            init_box: 0.05,
            max_episode_length: 200,
            gamma: 0.99,
        }
    }
}

/// Cart-pole balance with a continuous force in `[-1, 1]`. State is
/// `(x, ẋ, θ, θ̇)`; reward is 1 for every step taken.
#[derive(Debug, Clone)]
pub struct Cartpole {
    params: CartpoleParams,
    spec: EnvSpec,
}

impl Cartpole {
    pub fn new(params: CartpoleParams) -> Result<Self> {
        let p = &params;
        let positive = [p.gravity, p.cart_mass, p.pole_mass, p.half_length, p.force_mag, p.dt, p.x_threshold, p.theta_threshold];
        if positive.iter().any(|x| !(*x > 0.0)) || p.init_box < 0.0 {
            return Err(Error::param("cartpole physical parameters must be positive"));
        }
        if p.max_episode_length == 0 {
            return Err(Error::param("max_episode_length must be positive"));
        }
        check_gamma(p.gamma)?;
        let spec = EnvSpec {
            state_dim: 4,
            action_dim: 1,
            gamma: p.gamma,
            reward_lipschitz: 0.0,
            state_space_diameter: Diameter::Unbounded,
        };
        Ok(Self { params, spec })
    }

    pub fn params(&self) -> &CartpoleParams {
        &self.params
    }
}

impl Task for Cartpole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward(&self, _state: &[f64], _action: &[f64]) -> f64 {
        1.0
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        state[0].abs() > self.params.x_threshold || state[2].abs() > self.params.theta_threshold
    }

    fn max_episode_length(&self) -> usize {
        self.params.max_episode_length
    }
}

impl Env for Cartpole {
    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let b = self.params.init_box;
        (0..4).map(|_| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 }).collect()
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Result<Step> {
        check_dims(&self.spec, state, action)?;
        let p = &self.params;
        let force = clip_action(action)[0] * p.force_mag;
        let (x, x_dot, theta, theta_dot) = (state[0], state[1], state[2], state[3]);
        let (sin, cos) = theta.sin_cos();
        let total_mass = p.cart_mass + p.pole_mass;
        let pole_ml = p.pole_mass * p.half_length;
        let temp = (force + pole_ml * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc =
            (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_ml * theta_acc * cos / total_mass;
        let x_dot = x_dot + p.dt * x_acc;
        let theta_dot = theta_dot + p.dt * theta_acc;
        let next_state = vec![x + p.dt * x_dot, x_dot, theta + p.dt * theta_dot, theta_dot];
        let terminal = self.is_terminal(&next_state);
        Ok(Step { next_state, reward: 1.0, terminal })
    }
}

use serde::{Deserialize, Serialize};

use super::{check_dims, clip_action, Env, Step, Task};
use crate::error::{check_gamma, Error, Result};
use crate::mdp::{Diameter, EnvSpec};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditParams {
    /// Payoff of the arm selected by a negative action.
    pub left_payoff: f64,
    /// Payoff of the arm selected by a positive action.
    pub right_payoff: f64,
    /// Half-width of the linear ramp between the arms around `a = 0`.
    pub ramp: f64,
    pub gamma: f64,
}

impl Default for BanditParams {
    fn default() -> Self {
        Self { left_payoff: 0.0, right_payoff: 1.0, ramp: 0.1, gamma: 0.5 }
    }
}

/// Two-armed bandit embedded as a one-state environment: every episode is a
/// single terminal step, and the sign of the action picks the arm.
#[derive(Debug, Clone)]
pub struct Bandit {
    params: BanditParams,
    spec: EnvSpec,
}

impl Bandit {
    pub fn new(params: BanditParams) -> Result<Self> {
        if !(params.ramp > 0.0) || !params.left_payoff.is_finite() || !params.right_payoff.is_finite() {
            return Err(Error::param("bandit payoffs must be finite and ramp positive"));
        }
        check_gamma(params.gamma)?;
        let spec = EnvSpec {
            state_dim: 1,
            action_dim: 1,
            gamma: params.gamma,
            reward_lipschitz: (params.right_payoff - params.left_payoff).abs() / (2.0 * params.ramp),
            state_space_diameter: Diameter::Bounded(2.0),
        };
        Ok(Self { params, spec })
    }

    /// `true` when the right arm pays more.
    pub fn better_is_right(&self) -> bool {
        self.params.right_payoff > self.params.left_payoff
    }
}

impl Task for Bandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward(&self, _state: &[f64], action: &[f64]) -> f64 {
        let p = &self.params;
        let a = action[0].clamp(-1.0, 1.0);
        let w = ((a + p.ramp) / (2.0 * p.ramp)).clamp(0.0, 1.0);
        p.left_payoff + (p.right_payoff - p.left_payoff) * w
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        true
    }

    fn max_episode_length(&self) -> usize {
        1
    }
}

impl Env for Bandit {
    fn reset(&self, _rng: &mut Rng) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Result<Step> {
        check_dims(&self.spec, state, action)?;
        let reward = self.reward(state, &clip_action(action));
        Ok(Step { next_state: vec![0.0], reward, terminal: true })
    }
}

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{check_dims, clip_action, Env, Step, Task};
use crate::error::{check_gamma, Error, Result};
use crate::mdp::{Diameter, EnvSpec};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    /// Initial angle is uniform on `[-init_angle, init_angle]`.
    pub init_angle: f64,
    pub init_speed: f64,
    pub max_episode_length: usize,
    pub gamma: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            init_angle: PI,
            init_speed: 1.0,
            max_episode_length: 200,
            gamma: 0.99,
        }
    }
}

/// Torque-limited swing-up. The state is `(cos θ, sin θ, θ̇)` with `θ = 0`
/// upright; the action is a normalized torque in `[-1, 1]`. The angle is
/// advanced by rotating `(cos θ, sin θ)`, so the hanging rest state is an exact
/// fixed point.
#[derive(Debug, Clone)]
pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        let p = &params;
        if !(p.mass > 0.0 && p.length > 0.0 && p.gravity > 0.0 && p.dt > 0.0) {
            return Err(Error::param("pendulum physical parameters and dt must be positive"));
        }
        if !(p.max_torque > 0.0 && p.max_speed > 0.0 && p.init_angle >= 0.0 && p.init_speed >= 0.0) {
            return Err(Error::param("pendulum limits must be positive"));
        }
        if p.max_episode_length == 0 {
            return Err(Error::param("max_episode_length must be positive"));
        }
        check_gamma(p.gamma)?;
        // θ² is 2π-Lipschitz in arc length and arc <= (π/2)·chord on the circle.
        let l_theta = PI * PI;
        let l_speed = 0.2 * p.max_speed;
        let l_torque = 0.002 * p.max_torque * p.max_torque;
        let spec = EnvSpec {
            state_dim: 3,
            action_dim: 1,
            gamma: p.gamma,
            reward_lipschitz: (l_theta * l_theta + l_speed * l_speed + l_torque * l_torque).sqrt(),
            state_space_diameter: Diameter::Bounded((4.0 + 4.0 * p.max_speed * p.max_speed + 4.0).sqrt()),
        };
        Ok(Self { params, spec })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    pub fn angle(state: &[f64]) -> f64 {
        state[1].atan2(state[0])
    }

    pub fn from_angle(theta: f64, speed: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), speed]
    }

    /// Kinetic plus potential energy of the rod about its pivot.
    pub fn energy(&self, state: &[f64]) -> f64 {
        let p = &self.params;
        let inertia = p.mass * p.length * p.length / 3.0;
        let cos = state[0] / state[0].hypot(state[1]);
        0.5 * inertia * state[2] * state[2] + p.mass * p.gravity * 0.5 * p.length * cos
    }
}

impl Task for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let theta = Self::angle(state);
        let torque = action[0].clamp(-1.0, 1.0) * self.params.max_torque;
        -(theta * theta + 0.1 * state[2] * state[2] + 0.001 * torque * torque)
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn max_episode_length(&self) -> usize {
        self.params.max_episode_length
    }
}

impl Env for Pendulum {
    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let p = &self.params;
        let theta = if p.init_angle > 0.0 { rng.random_range(-p.init_angle..=p.init_angle) } else { 0.0 };
        let speed = if p.init_speed > 0.0 { rng.random_range(-p.init_speed..=p.init_speed) } else { 0.0 };
        Self::from_angle(theta, speed)
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut Rng) -> Result<Step> {
        check_dims(&self.spec, state, action)?;
        let p = &self.params;
        let action = clip_action(action);
        let reward = self.reward(state, &action);
        let torque = action[0] * p.max_torque;
        let norm = state[0].hypot(state[1]);
        let (cos, sin) = (state[0] / norm, state[1] / norm);
        // Semi-implicit Euler: velocity first, then angle with the new velocity.
        let accel = 1.5 * p.gravity / p.length * sin + 3.0 / (p.mass * p.length * p.length) * torque;
        let speed = (state[2] + accel * p.dt).clamp(-p.max_speed, p.max_speed);
        let delta = speed * p.dt;
        let (dsin, dcos) = delta.sin_cos();
        let mut next_cos = cos * dcos - sin * dsin;
        let mut next_sin = sin * dcos + cos * dsin;
        let r = next_cos.hypot(next_sin);
        if r != 1.0 {
            next_cos /= r;
            next_sin /= r;
        }
        Ok(Step { next_state: vec![next_cos, next_sin, speed], reward, terminal: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn reset_angle_mean_is_zero() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let mut rng = seeded(11);
        let n = 100_000;
        let mean = (0..n).map(|_| Pendulum::angle(&env.reset(&mut rng))).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn hanging_rest_state_is_fixed() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let mut rng = seeded(12);
        let rest = vec![-1.0, 0.0, 0.0];
        let mut s = rest.clone();
        for _ in 0..500 {
            s = env.step(&s, &[0.0], &mut rng).unwrap().next_state;
            assert_eq!(s, rest);
        }
    }

    #[test]
    fn energy_drift_per_step_is_small() {
        // Semi-implicit Euler keeps a bounded O(dt) energy oscillation; the
        // drift is the secular trend, i.e. the least-squares slope of E(t).
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let mut rng = seeded(13);
        for start in [0.3, 1.5, 2.8] {
            let mut s = Pendulum::from_angle(start, 0.0);
            let steps = 20_000;
            let mut energies = Vec::with_capacity(steps);
            for _ in 0..steps {
                s = env.step(&s, &[0.0], &mut rng).unwrap().next_state;
                energies.push(env.energy(&s));
            }
            let n = steps as f64;
            let t_mean = (n - 1.0) / 2.0;
            let e_mean = energies.iter().sum::<f64>() / n;
            let (mut num, mut den) = (0.0, 0.0);
            for (t, e) in energies.iter().enumerate() {
                num += (t as f64 - t_mean) * (e - e_mean);
                den += (t as f64 - t_mean).powi(2);
            }
            let slope = num / den;
            assert!(slope.abs() < 1e-4, "start {start}: drift per step {slope}");
        }
    }

    #[test]
    fn reward_at_upright_rest_is_zero() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        assert_eq!(env.reward(&[1.0, 0.0, 0.0], &[0.0]), 0.0);
        let r = env.reward(&Pendulum::from_angle(0.5, 1.0), &[0.5]);
        assert!((r + (0.25 + 0.1 + 0.001)).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clipped() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let mut rng = seeded(14);
        let s = Pendulum::from_angle(1.0, 0.0);
        let a = env.step(&s, &[5.0], &mut rng).unwrap();
        let b = env.step(&s, &[1.0], &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let mut rng = seeded(15);
        assert!(matches!(env.step(&[1.0, 0.0], &[0.0], &mut rng), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn published_lipschitz_bounds_sampled_slopes() {
        let env = Pendulum::new(PendulumParams::default()).unwrap();
        let l = env.spec().reward_lipschitz;
        let mut rng = seeded(16);
        for _ in 0..20_000 {
            let s1 = Pendulum::from_angle(rng.random_range(-PI..PI), rng.random_range(-8.0..8.0));
            let s2 = Pendulum::from_angle(rng.random_range(-PI..PI), rng.random_range(-8.0..8.0));
            let (a1, a2): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let d = ((s1[0] - s2[0]).powi(2) + (s1[1] - s2[1]).powi(2) + (s1[2] - s2[2]).powi(2) + (a1 - a2).powi(2)).sqrt();
            let dr = (env.reward(&s1, &[a1]) - env.reward(&s2, &[a2])).abs();
            assert!(dr <= l * d + 1e-9);
        }
    }
}

//! Trajectory data and discounted-measure arithmetic shared by every other
//! module.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{check_gamma, Error, Result};
use crate::rng::Rng;

/// Diameter of the state-action set under the environment's metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diameter {
    Bounded(f64),
    Unbounded,
}

impl Diameter {
    pub fn value(self) -> Option<f64> {
        match self {
            Diameter::Bounded(d) => Some(d),
            Diameter::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    /// Lipschitz constant of the reward function `r(s, a)`.
    pub reward_lipschitz: f64,
    pub state_space_diameter: Diameter,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::param("state_dim and action_dim must be positive"));
        }
        check_gamma(self.gamma)?;
        if !(self.reward_lipschitz.is_finite() && self.reward_lipschitz >= 0.0) {
            return Err(Error::param("reward_lipschitz must be finite and nonnegative"));
        }
        if let Diameter::Bounded(d) = self.state_space_diameter {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::param("state_space_diameter must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

/// An ordered run of transitions. Consecutive tuples chain: the next state of
/// a non-terminal tuple is the state of the following one.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    tuples: Vec<TransitionTuple>,
    source: Source,
}

impl Trajectory {
    pub fn empty(source: Source) -> Self {
        Self { tuples: Vec::new(), source }
    }

    pub fn new(tuples: Vec<TransitionTuple>, source: Source) -> Result<Self> {
        let mut traj = Self::empty(source);
        for t in tuples {
            traj.push(t)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, tuple: TransitionTuple) -> Result<()> {
        if !tuple.reward.is_finite() {
            return Err(Error::input("reward must be finite"));
        }
        if tuple.state.len() != tuple.next_state.len() {
            return Err(Error::input("state and next_state lengths differ"));
        }
        if let Some(last) = self.tuples.last() {
            if last.state.len() != tuple.state.len() || last.action.len() != tuple.action.len() {
                return Err(Error::input("tuple dimensions change within a trajectory"));
            }
            if last.terminal {
                return Err(Error::input("cannot extend a trajectory past a terminal tuple"));
            }
            if last.next_state != tuple.state {
                return Err(Error::input("trajectory does not chain: next_state != following state"));
            }
        }
        self.tuples.push(tuple);
        Ok(())
    }

    pub fn tuples(&self) -> &[TransitionTuple] {
        &self.tuples
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.tuples.iter().map(|t| t.reward)
    }

    pub fn check_dims(&self, spec: &EnvSpec) -> Result<()> {
        for t in &self.tuples {
            if t.state.len() != spec.state_dim || t.action.len() != spec.action_dim {
                return Err(Error::input(format!(
                    "tuple dims ({}, {}) do not match spec ({}, {})",
                    t.state.len(),
                    t.action.len(),
                    spec.state_dim,
                    spec.action_dim
                )));
            }
        }
        Ok(())
    }
}

/// Normalized discounted distribution over `(s, a)` or `(s, a, s')` points.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyEstimate {
    support: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl OccupancyEstimate {
    /// Builds an estimate from unnormalized nonnegative weights.
    pub fn from_unnormalized(support: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::input("support and weights differ in length"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::input("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::input("occupancy has zero total mass"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.support.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }

    /// Merges bitwise-identical support points, keeping first-seen order.
    pub fn aggregate(&self) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut support = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (x, &w) in self.support.iter().zip(&self.weights) {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => weights[i] += w,
                None => {
                    index.insert(key, support.len());
                    support.push(x.clone());
                    weights.push(w);
                }
            }
        }
        Self { support, weights }
    }
}

/// How per-step weights are assigned when building an empirical occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Step `t` gets `(1-γ)γ^t`; used with fixed-length rollouts.
    #[default]
    Discounted,
    /// Every step gets equal weight; used with geometric-horizon rollouts,
    /// where the horizon draw already carries the discount.
    Uniform,
}

/// Which points make up the support of an empirical occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupportKind {
    #[default]
    StateAction,
    Triple,
}

/// Draws `H ~ Geometric(1-γ)` on `{1, 2, ...}`.
pub fn sample_horizon(gamma: f64, rng: &mut Rng) -> Result<usize> {
    check_gamma(gamma)?;
    let geo = Geometric::new(1.0 - gamma).map_err(|e| Error::param(e.to_string()))?;
    // `Geometric` counts failures before the first success.
    Ok(geo.sample(rng) as usize + 1)
}

/// `Σ_t γ^t r_t` over the trajectory.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::input("discounted_return of an empty trajectory"));
    }
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in traj.rewards() {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total)
}

pub fn empirical_occupancy(trajs: &[Trajectory], gamma: f64) -> Result<OccupancyEstimate> {
    empirical_occupancy_with(trajs, gamma, Weighting::Discounted, SupportKind::StateAction)
}

pub fn empirical_occupancy_with(
    trajs: &[Trajectory],
    gamma: f64,
    weighting: Weighting,
    kind: SupportKind,
) -> Result<OccupancyEstimate> {
    check_gamma(gamma)?;
    if trajs.iter().all(Trajectory::is_empty) {
        return Err(Error::input("empirical_occupancy needs at least one non-empty trajectory"));
    }
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for traj in trajs {
        let mut discount = 1.0 - gamma;
        for t in traj.tuples() {
            let mut point = t.state.clone();
            point.extend_from_slice(&t.action);
            if kind == SupportKind::Triple {
                point.extend_from_slice(&t.next_state);
            }
            support.push(point);
            weights.push(match weighting {
                Weighting::Discounted => discount,
                Weighting::Uniform => 1.0,
            });
            discount *= gamma;
        }
    }
    OccupancyEstimate::from_unnormalized(support, weights)
}

// Line-delimited trajectory batches:
//
//   #mi-trajectories v1 state_dim=<S> action_dim=<A>
//   #trajectory real|synthetic
//   s_1 .. s_S a_1 .. a_A r s'_1 .. s'_S terminal(0|1)
//
// Floats use the shortest representation that round-trips exactly.
const TRAJ_MAGIC: &str = "#mi-trajectories v1";

pub fn write_trajectories<W: Write>(
    mut out: W,
    trajs: &[Trajectory],
    state_dim: usize,
    action_dim: usize,
) -> Result<()> {
    writeln!(out, "{TRAJ_MAGIC} state_dim={state_dim} action_dim={action_dim}")?;
    for traj in trajs {
        traj.check_dims(&EnvSpec {
            state_dim,
            action_dim,
            gamma: 0.5,
            reward_lipschitz: 0.0,
            state_space_diameter: Diameter::Unbounded,
        })?;
        let src = match traj.source() {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        };
        writeln!(out, "#trajectory {src}")?;
        for t in traj.tuples() {
            let mut fields: Vec<String> = Vec::with_capacity(2 * state_dim + action_dim + 2);
            fields.extend(t.state.iter().map(f64::to_string));
            fields.extend(t.action.iter().map(f64::to_string));
            fields.push(t.reward.to_string());
            fields.extend(t.next_state.iter().map(f64::to_string));
            fields.push(if t.terminal { "1" } else { "0" }.to_string());
            writeln!(out, "{}", fields.join(" "))?;
        }
    }
    Ok(())
}

/// Returns `(state_dim, action_dim, trajectories)`.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<(usize, usize, Vec<Trajectory>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::format("empty trajectory file"))??;
    let rest = header
        .strip_prefix(TRAJ_MAGIC)
        .ok_or_else(|| Error::format("missing trajectory header"))?;
    let mut state_dim = None;
    let mut action_dim = None;
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad header field {field}")))?;
        let v: usize = v.parse().map_err(|_| Error::format(format!("bad header value {field}")))?;
        match k {
            "state_dim" => state_dim = Some(v),
            "action_dim" => action_dim = Some(v),
            _ => return Err(Error::format(format!("unknown header field {k}"))),
        }
    }
    let s = state_dim.ok_or_else(|| Error::format("header lacks state_dim"))?;
    let a = action_dim.ok_or_else(|| Error::format("header lacks action_dim"))?;

    let mut trajs: Vec<Trajectory> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(src) = line.strip_prefix("#trajectory") {
            let source = match src.trim() {
                "real" => Source::Real,
                "synthetic" => Source::Synthetic,
                other => return Err(Error::format(format!("unknown source {other}"))),
            };
            trajs.push(Trajectory::empty(source));
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 2 * s + a + 2 {
            return Err(Error::format(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                2 * s + a + 2,
                vals.len()
            )));
        }
        let num = |x: &str| -> Result<f64> {
            x.parse().map_err(|_| Error::format(format!("line {}: bad number {x}", lineno + 2)))
        };
        let nums = vals[..vals.len() - 1].iter().map(|x| num(x)).collect::<Result<Vec<f64>>>()?;
        let terminal = match vals[vals.len() - 1] {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(format!("bad terminal flag {other}"))),
        };
        let tuple = TransitionTuple {
            state: nums[..s].to_vec(),
            action: nums[s..s + a].to_vec(),
            reward: nums[s + a],
            next_state: nums[s + a + 1..].to_vec(),
            terminal,
        };
        let traj = trajs
            .last_mut()
            .ok_or_else(|| Error::format("tuple before any #trajectory marker"))?;
        traj.push(tuple)?;
    }
    Ok((s, a, trajs))
}

//! Finite MDPs with an explicit transition tensor.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::{Env, Step, Task};
use crate::error::{check_gamma, Error, Result};
use crate::mdp::{Diameter, EnvSpec, Source, Trajectory, TransitionTuple};
use crate::rng::Rng;

const ROW_TOL: f64 = 1e-12;

/// `T(s'|s,a)`, `r(s,a)`, `α(s)` and `γ` of a finite MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
    alpha: Vec<f64>,
    gamma: f64,
    spec: EnvSpec,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::input(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::input(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        alpha: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::param("n_states and n_actions must be positive"));
        }
        check_gamma(gamma)?;
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::input("transition tensor has the wrong size"));
        }
        if reward.len() != n_states * n_actions || alpha.len() != n_states {
            return Err(Error::input("reward table or alpha has the wrong size"));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::input("reward table has a non-finite entry"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            check_distribution(row, &format!("transition row (s={}, a={})", i / n_actions, i % n_actions))?;
        }
        check_distribution(&alpha, "alpha")?;
        let spec = EnvSpec {
            state_dim: 1,
            action_dim: 1,
            gamma,
            reward_lipschitz: hamming_reward_lipschitz(n_states, n_actions, &reward),
            // Hamming distance on (s, a) is at most 2.
            state_space_diameter: Diameter::Bounded(if n_states > 1 || n_actions > 1 { 2.0 } else { 1.0 }),
        };
        Ok(Self { n_states, n_actions, transition, reward, alpha, gamma, spec })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        self.spec.gamma = gamma;
        Ok(self)
    }

    pub fn with_alpha(self, alpha: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.transition, self.reward, alpha, self.gamma)
    }

    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, transition, self.reward.clone(), self.alpha.clone(), self.gamma)
    }

    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.transition.clone(), reward, self.alpha.clone(), self.gamma)
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.alpha, rng)
    }

    pub fn sample_next(&self, s: usize, a: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.row(s, a), rng)
    }

    /// Rolls out `horizon` steps under a tabular policy, encoding states and
    /// actions as one-element index vectors.
    pub fn rollout(&self, policy: &TabularPolicy, start: usize, horizon: usize, rng: &mut Rng) -> Trajectory {
        let mut traj = Trajectory::empty(Source::Real);
        let mut s = start;
        for _ in 0..horizon {
            let a = policy.sample(s, rng);
            let next = self.sample_next(s, a, rng);
            traj.push(TransitionTuple {
                state: vec![s as f64],
                action: vec![a as f64],
                reward: self.r(s, a),
                next_state: vec![next as f64],
                terminal: false,
            })
            .expect("tabular rollout chains by construction");
            s = next;
        }
        traj
    }

    // Text format:
    //   #tabular-mdp v1 n_states=S n_actions=A gamma=G
    //   alpha p_0 .. p_{S-1}
    //   reward <s> r(s,0) .. r(s,A-1)          (S lines)
    //   T <s> <a> p_0 .. p_{S-1}               (S*A lines)
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "#tabular-mdp v1 n_states={} n_actions={} gamma={}",
            self.n_states, self.n_actions, self.gamma
        )?;
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(out, "alpha {}", join(&self.alpha))?;
        for s in 0..self.n_states {
            writeln!(out, "reward {s} {}", join(&self.reward[s * self.n_actions..(s + 1) * self.n_actions]))?;
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                writeln!(out, "T {s} {a} {}", join(self.row(s, a)))?;
            }
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty tabular MDP file"))??;
        let rest = header
            .strip_prefix("#tabular-mdp v1")
            .ok_or_else(|| Error::format("missing tabular MDP header"))?;
        let (mut ns, mut na, mut gamma) = (None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| Error::format(format!("bad field {field}")))?;
            let bad = || Error::format(format!("bad header value {field}"));
            match k {
                "n_states" => ns = Some(v.parse::<usize>().map_err(|_| bad())?),
                "n_actions" => na = Some(v.parse::<usize>().map_err(|_| bad())?),
                "gamma" => gamma = Some(v.parse::<f64>().map_err(|_| bad())?),
                _ => return Err(Error::format(format!("unknown header field {k}"))),
            }
        }
        let ns = ns.ok_or_else(|| Error::format("header lacks n_states"))?;
        let na = na.ok_or_else(|| Error::format("header lacks n_actions"))?;
        let gamma = gamma.ok_or_else(|| Error::format("header lacks gamma"))?;

        let mut alpha = None;
        let mut reward = vec![f64::NAN; ns * na];
        let mut transition = vec![f64::NAN; ns * na * ns];
        for line in lines {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let Some((&tag, rest)) = toks.split_first() else { continue };
            let nums = |xs: &[&str]| -> Result<Vec<f64>> {
                xs.iter().map(|x| x.parse().map_err(|_| Error::format(format!("bad number {x}")))).collect()
            };
            let index = |x: &str, n: usize| -> Result<usize> {
                x.parse::<usize>().ok().filter(|&i| i < n).ok_or_else(|| Error::format(format!("bad index {x}")))
            };
            match tag {
                "alpha" => alpha = Some(nums(rest)?),
                "reward" if rest.len() == na + 1 => {
                    let s = index(rest[0], ns)?;
                    reward[s * na..(s + 1) * na].copy_from_slice(&nums(&rest[1..])?);
                }
                "T" if rest.len() == ns + 2 => {
                    let s = index(rest[0], ns)?;
                    let a = index(rest[1], na)?;
                    let start = (s * na + a) * ns;
                    transition[start..start + ns].copy_from_slice(&nums(&rest[2..])?);
                }
                _ => return Err(Error::format(format!("unrecognized line: {line}"))),
            }
        }
        let alpha = alpha.ok_or_else(|| Error::format("missing alpha line"))?;
        if reward.iter().chain(&transition).any(|x| x.is_nan()) {
            return Err(Error::format("missing reward or transition rows"));
        }
        Self::new(ns, na, transition, reward, alpha, gamma)
    }
}

/// Smallest `L` with `|r(s,a) - r(s̃,ã)| <= L · ([s≠s̃] + [a≠ã])`.
pub fn hamming_reward_lipschitz(n_states: usize, n_actions: usize, reward: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..n_states * n_actions {
        for j in (i + 1)..n_states * n_actions {
            let d = usize::from(i / n_actions != j / n_actions) + usize::from(i % n_actions != j % n_actions);
            best = best.max((reward[i] - reward[j]).abs() / d as f64);
        }
    }
    best
}

pub(crate) fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair under 1; fall back to the last atom with mass.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn dirichlet_row(n: usize, concentration: f64, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut row: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|x| *x /= sum);
    } else {
        row = vec![1.0 / n as f64; n];
    }
    row
}

/// Random MDP generator. Rows are symmetric Dirichlet with concentration
/// `1 + smoothing`, so `smoothing = 0` is uniform on the simplex and large
/// smoothing concentrates rows around `1/n_states`. Rewards are `U[0,1]`,
/// `α` is a flat Dirichlet draw and `γ = 0.9`.
pub fn make_random_mdp(n_states: usize, n_actions: usize, rng: &mut Rng, smoothing: f64) -> Result<TabularMDP> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::param("n_states and n_actions must be at least 1"));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::param("smoothing must be a nonnegative finite number"));
    }
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transition.extend(dirichlet_row(n_states, 1.0 + smoothing, rng));
    }
    let reward = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
    let alpha = dirichlet_row(n_states, 1.0, rng);
    TabularMDP::new(n_states, n_actions, transition, reward, alpha, 0.9)
}

/// `π(a|s)` for a finite MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::input("policy table has the wrong size"));
        }
        for row in probs.chunks(n_actions) {
            check_distribution(row, "policy row")?;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            probs.extend(dirichlet_row(n_actions, 1.0, rng));
        }
        Self { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample(&self, s: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.row(s), rng)
    }
}

fn index_of(x: &[f64], n: usize, what: &str) -> Result<usize> {
    if x.len() != 1 {
        return Err(Error::input(format!("tabular {what} must be a single index")));
    }
    let i = x[0].round();
    if !(i >= 0.0 && (i as usize) < n) {
        return Err(Error::input(format!("tabular {what} {} out of range", x[0])));
    }
    Ok(i as usize)
}

impl Task for TabularMDP {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let s = index_of(state, self.n_states, "state").unwrap_or(0);
        let a = (action[0].round().max(0.0) as usize).min(self.n_actions - 1);
        self.r(s, a)
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn max_episode_length(&self) -> usize {
        // Effective horizon of the discount.
        (10.0 / (1.0 - self.gamma)).ceil() as usize
    }
}

impl Env for TabularMDP {
    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![self.sample_initial(rng) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Step> {
        let s = index_of(state, self.n_states, "state")?;
        if action.len() != 1 {
            return Err(Error::input("tabular action must be a single index"));
        }
        let a = (action[0].round().max(0.0) as usize).min(self.n_actions - 1);
        let next = self.sample_next(s, a, rng);
        Ok(Step { next_state: vec![next as f64], reward: self.r(s, a), terminal: false })
    }
}

//! Exact verification machinery for finite MDPs.
//!
//! Occupancy measures come from a direct linear solve of the Bellman flow
//! system, Wasserstein distances from an exact transportation simplex. The
//! `verify_*` functions turn the consistency, error-bound and short-horizon
//! results into numeric certificates on concrete instances.

mod bounds;
mod occupancy;
mod transport;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use bounds::{
    sampling_decomposition_report, short_horizon_bound, verify_consistency, verify_error_bound,
    verify_short_horizon_bound, BoundReport, ConsistencyOptions, DecompositionRow, SLACK_TOL,
};
pub use occupancy::{
    exact_occupancy, exact_triple_occupancy, flow_residual, occupancy_to_policy, state_occupancy,
    PolicyRecovery,
};
pub use transport::{euclidean, hamming, transport, wasserstein1, Transport};

/// Finite distribution over points in `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

const SUM_TOL: f64 = 1e-12;

impl DiscreteDistribution {
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.len() != probs.len() || atoms.is_empty() {
            return Err(Error::input("a distribution needs as many probabilities as atoms, and at least one"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::input("probabilities must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL * probs.len().max(1) as f64 {
            return Err(Error::input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { atoms, probs })
    }

    /// Renormalizes nonnegative weights.
    pub fn from_weights(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::input("weights have no positive finite mass"));
        }
        Self::new(atoms, weights.into_iter().map(|w| w / total).collect())
    }

    /// Atoms `[s, a]` in row-major `(s, a)` order.
    pub fn over_pairs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let atoms = (0..n_states)
            .flat_map(|s| (0..n_actions).map(move |a| vec![s as f64, a as f64]))
            .collect();
        Self::new(atoms, probs)
    }

    /// Atoms `[s, a, s']` in row-major `(s, a, s')` order.
    pub fn over_triples(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let atoms = (0..n_states)
            .flat_map(|s| {
                (0..n_actions).flat_map(move |a| (0..n_states).map(move |t| vec![s as f64, a as f64, t as f64]))
            })
            .collect();
        Self::new(atoms, probs)
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(x, p)| p * f(x)).sum()
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// `½ Σ |p(x) − q(x)|` over the union of both supports; atoms are matched
/// by exact equality.
pub fn tv_distance(p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
    let mut diff: HashMap<Vec<u64>, f64> = HashMap::new();
    for (x, w) in p.atoms.iter().zip(&p.probs) {
        *diff.entry(key(x)).or_default() += w;
    }
    for (x, w) in q.atoms.iter().zip(&q.probs) {
        *diff.entry(key(x)).or_default() -= w;
    }
    0.5 * diff.values().map(|d| d.abs()).sum::<f64>()
}

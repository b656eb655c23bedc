use nalgebra::{DMatrix, DVector};

use super::DiscreteDistribution;
use crate::envs::{TabularMDP, TabularPolicy};
use crate::error::{Error, Result};

fn check_discount(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::param(format!("discount must lie in [0,1), got {gamma}")))
    }
}

fn check_shapes(n_states: usize, n_actions: usize, transition: &[f64], alpha: &[f64], policy: &TabularPolicy) -> Result<()> {
    if transition.len() != n_states * n_actions * n_states || alpha.len() != n_states {
        return Err(Error::input("transition or initial distribution has the wrong size"));
    }
    if policy.n_states() != n_states || policy.n_actions() != n_actions {
        return Err(Error::input("policy dimensions do not match the MDP"));
    }
    Ok(())
}

/// Discounted state occupancy `d` solving `(I − γ P_πᵀ) d = (1−γ) α`, where
/// `P_π(s, s') = Σ_a π(a|s) T(s'|s,a)`. `transition` is row-major
/// `[s][a][s']`. `γ = 0` is allowed and gives `d = α`.
pub fn state_occupancy(
    n_states: usize,
    n_actions: usize,
    transition: &[f64],
    alpha: &[f64],
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_discount(gamma)?;
    check_shapes(n_states, n_actions, transition, alpha, policy)?;
    let n = n_states;
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for a in 0..n_actions {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let row = &transition[(s * n_actions + a) * n..(s * n_actions + a + 1) * n];
            for (t, &p) in row.iter().enumerate() {
                // Row t of Mᵀ collects inflow into t.
                m[(t, s)] -= gamma * pa * p;
            }
        }
    }
    let rhs = DVector::from_iterator(n, alpha.iter().map(|a| (1.0 - gamma) * a));
    let d = m.lu().solve(&rhs).ok_or_else(|| Error::Numerical("Bellman flow system is singular".into()))?;
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Bellman flow solve produced a non-finite value".into()));
    }
    // Round-off can leave tiny negatives on unreachable states.
    let mut d: Vec<f64> = d.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Ok(d)
}

fn pair_probs(mdp_states: usize, n_actions: usize, d: &[f64], policy: &TabularPolicy) -> Vec<f64> {
    (0..mdp_states)
        .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
        .map(|(s, a)| d[s] * policy.prob(s, a))
        .collect()
}

/// Normalized occupancy `ρ(s, a) = π(a|s) d(s)` of `(mdp.alpha, policy, mdp.T)`
/// at discount `gamma`.
pub fn exact_occupancy(mdp: &TabularMDP, policy: &TabularPolicy, gamma: f64) -> Result<DiscreteDistribution> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let d = state_occupancy(ns, na, mdp.transition(), mdp.alpha(), policy, gamma)?;
    DiscreteDistribution::over_pairs(ns, na, pair_probs(ns, na, &d, policy))
}

/// `p(s, a, s') = ρ(s, a) T(s'|s, a)`.
pub fn exact_triple_occupancy(mdp: &TabularMDP, policy: &TabularPolicy, gamma: f64) -> Result<DiscreteDistribution> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let rho = exact_occupancy(mdp, policy, gamma)?;
    let mut probs = Vec::with_capacity(ns * na * ns);
    for s in 0..ns {
        for a in 0..na {
            let x = rho.probs()[s * na + a];
            probs.extend(mdp.row(s, a).iter().map(|p| x * p));
        }
    }
    DiscreteDistribution::over_triples(ns, na, probs)
}

/// `‖x − F(x)‖∞` for the flow map
/// `F(x)(s, a) = π(a|s) [(1−γ) α(s) + γ Σ_{s̄,ā} T(s|s̄,ā) x(s̄, ā)]`.
pub fn flow_residual(mdp: &TabularMDP, policy: &TabularPolicy, gamma: f64, x: &DiscreteDistribution) -> f64 {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let xp = x.probs();
    let mut inflow = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            for (t, p) in mdp.row(s, a).iter().enumerate() {
                inflow[t] += p * xp[s * na + a];
            }
        }
    }
    let mut worst: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let fx = policy.prob(s, a) * ((1.0 - gamma) * mdp.alpha()[s] + gamma * inflow[s]);
            worst = worst.max((xp[s * na + a] - fx).abs());
        }
    }
    worst
}

/// Conditional policy recovered from an occupancy over `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRecovery {
    pub policy: TabularPolicy,
    /// `true` where the state marginal is zero and the row was set uniform.
    pub undefined: Vec<bool>,
}

/// `π(a|s) = ρ(s, a) / Σ_a ρ(s, a)`. `rho` must be laid out as produced by
/// [`DiscreteDistribution::over_pairs`].
pub fn occupancy_to_policy(rho: &DiscreteDistribution, n_states: usize, n_actions: usize) -> Result<PolicyRecovery> {
    if rho.len() != n_states * n_actions {
        return Err(Error::input("occupancy size does not match the state/action counts"));
    }
    let mut probs = Vec::with_capacity(n_states * n_actions);
    let mut undefined = vec![false; n_states];
    for s in 0..n_states {
        let row = &rho.probs()[s * n_actions..(s + 1) * n_actions];
        let mass: f64 = row.iter().sum();
        if mass > 0.0 {
            probs.extend(row.iter().map(|p| p / mass));
        } else {
            undefined[s] = true;
            probs.extend(std::iter::repeat_n(1.0 / n_actions as f64, n_actions));
        }
    }
    // Renormalize rows exactly so the policy constructor's tolerance holds.
    for row in probs.chunks_mut(n_actions) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(PolicyRecovery { policy: TabularPolicy::new(n_states, n_actions, probs)?, undefined })
}

//! Exact optimal transport between finite distributions by the
//! transportation simplex (northwest-corner start, MODI potentials, Bland's
//! rule for both entering and leaving cells).

use std::collections::VecDeque;

use super::DiscreteDistribution;
use crate::error::{Error, Result};

const METRIC_TOL: f64 = 1e-12;

/// Optimal plan with its cost and dual potentials `u_i + v_j ≤ C_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transport {
    pub cost: f64,
    /// Basic cells `(i, j, flow)`, including degenerate zero flows.
    pub plan: Vec<(usize, usize, f64)>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
}

pub fn hamming(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).filter(|(a, b)| a != b).count() as f64
}

pub fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

struct Tree {
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    m: usize,
    n: usize,
}

impl Tree {
    /// Adjacency over nodes `0..m` (rows) and `m..m+n` (columns); each entry
    /// is `(neighbor, cell index)`.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &[f64], adj: &[Vec<(usize, usize)>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (m, n) = (self.m, self.n);
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[next] = cost[i * n + j] - pot[node];
                    queue.push_back(next);
                }
            }
        }
        if pot.iter().any(|p| p.is_nan()) {
            return Err(Error::Numerical("transport basis is not a spanning tree".into()));
        }
        Ok((pot[..m].to_vec(), pot[m..].to_vec()))
    }

    /// Cell indices on the tree path from row `i` to column `j`.
    fn path(&self, i: usize, j: usize, adj: &[Vec<(usize, usize)>]) -> Vec<usize> {
        let target = self.m + j;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[i] = true;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut cells = Vec::new();
        let mut node = target;
        while node != i {
            let (prev, k) = parent[node].expect("tree is connected");
            cells.push(k);
            node = prev;
        }
        cells.reverse();
        cells
    }
}

fn northwest_corner(a: &[f64], b: &[f64]) -> Tree {
    let (m, n) = (a.len(), b.len());
    let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    let mut cells = Vec::with_capacity(m + n - 1);
    let mut flow = Vec::with_capacity(m + n - 1);
    loop {
        let x = ra[i].min(rb[j]).max(0.0);
        cells.push((i, j));
        flow.push(x);
        ra[i] -= x;
        rb[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && ra[i] <= rb[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }
    Tree { cells, flow, m, n }
}

/// Minimum-cost transport of supplies `a` to demands `b` under the row-major
/// `a.len() x b.len()` cost matrix.
pub fn transport(a: &[f64], b: &[f64], cost: &[f64]) -> Result<Transport> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 || cost.len() != m * n {
        return Err(Error::input("transport needs non-empty marginals and an m x n cost matrix"));
    }
    if a.iter().chain(b).any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::input("marginals must be finite and nonnegative"));
    }
    if cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::InvalidMetric("costs must be finite and nonnegative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::input(format!("marginals carry different mass ({sa} vs {sb})")));
    }
    let scale = cost.iter().fold(0.0f64, |acc, c| acc.max(*c)).max(1.0);
    let eps = 1e-12 * scale;
    let mut tree = northwest_corner(a, b);
    let max_pivots = 100 * (m * n) + 1000;
    let mut pivots = 0;
    loop {
        let adj = tree.adjacency();
        let (u, v) = tree.potentials(cost, &adj)?;
        let entering = (0..m * n).find(|&k| cost[k] - u[k / n] - v[k % n] < -eps);
        let Some(k) = entering else {
            let total = tree.cells.iter().zip(&tree.flow).map(|(&(i, j), f)| f * cost[i * n + j]).sum();
            let plan = tree.cells.iter().zip(&tree.flow).map(|(&(i, j), &f)| (i, j, f)).collect();
            return Ok(Transport { cost: total, plan, u, v, pivots });
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Numerical("transport simplex did not terminate".into()));
        }
        let (ei, ej) = (k / n, k % n);
        let path = tree.path(ei, ej, &adj);
        // Path cells alternate −, +, −, ... starting next to the entering cell.
        let mut leave: Option<usize> = None;
        for &c in path.iter().step_by(2) {
            leave = match leave {
                None => Some(c),
                Some(l) => {
                    let better = tree.flow[c] < tree.flow[l]
                        || (tree.flow[c] == tree.flow[l] && tree.cells[c] < tree.cells[l]);
                    Some(if better { c } else { l })
                }
            };
        }
        let leave = leave.expect("cycle has at least one decreasing cell");
        let theta = tree.flow[leave];
        for (pos, &c) in path.iter().enumerate() {
            if pos % 2 == 0 {
                tree.flow[c] = (tree.flow[c] - theta).max(0.0);
            } else {
                tree.flow[c] += theta;
            }
        }
        tree.cells[leave] = (ei, ej);
        tree.flow[leave] = theta;
    }
}

fn check_metric(points: &[&Vec<f64>], metric: &impl Fn(&[f64], &[f64]) -> f64) -> Result<()> {
    for (i, x) in points.iter().enumerate() {
        let dxx = metric(x, x);
        if dxx.abs() > METRIC_TOL {
            return Err(Error::InvalidMetric(format!("d(x, x) = {dxx} is not zero")));
        }
        for y in &points[i + 1..] {
            let (dxy, dyx) = (metric(x, y), metric(y, x));
            if !(dxy.is_finite() && dxy >= 0.0) {
                return Err(Error::InvalidMetric(format!("distance {dxy} is negative or non-finite")));
            }
            if (dxy - dyx).abs() > METRIC_TOL * dxy.abs().max(1.0) {
                return Err(Error::InvalidMetric(format!("asymmetric cost: {dxy} vs {dyx}")));
            }
        }
    }
    Ok(())
}

/// `W1(p, q)` under `metric`, solved exactly. The metric is checked for
/// zero diagonal, nonnegativity and symmetry on the atoms involved.
pub fn wasserstein1(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    Ok(wasserstein1_plan(p, q, &metric)?.cost)
}

pub(crate) fn wasserstein1_plan(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: &impl Fn(&[f64], &[f64]) -> f64,
) -> Result<Transport> {
    let points: Vec<&Vec<f64>> = p.atoms().iter().chain(q.atoms()).collect();
    check_metric(&points, metric)?;
    let mut cost = Vec::with_capacity(p.len() * q.len());
    for x in p.atoms() {
        for y in q.atoms() {
            cost.push(metric(x, y));
        }
    }
    transport(p.probs(), q.probs(), &cost)
}

//! Learned transition model `T_φ(s'|s,a)`.
//!
//! The network sees `(normalize(s), a)` and outputs the mean of the
//! normalized state difference `(s' − s) / σ_n`; a state-independent log-std
//! vector completes the Gaussian. Training combines a clipped-surrogate
//! ascent on critic pseudo-rewards with `l2` regression on real transitions:
//! `L = −w · L_PPO + η · L_l2`.

use serde::{Deserialize, Serialize};

use crate::envs::{check_dims, Env, Task, TabularMDP};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Blob, GaussianHead, GradBuffer, Mlp, Section};
use crate::rng::Rng;

/// Floor applied to every running standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Running per-coordinate mean and population standard deviation (Chan et
/// al. streaming merge). Before any data it is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], m2: vec![0.0; dim], count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).sqrt().max(STD_FLOOR)).collect()
    }

    pub fn update(&mut self, states: &[Vec<f64>]) {
        if states.is_empty() {
            return;
        }
        let n = states.len() as f64;
        let dim = self.dim();
        let mut bmean = vec![0.0; dim];
        for s in states {
            for (m, x) in bmean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut bm2 = vec![0.0; dim];
        for s in states {
            for i in 0..dim {
                let d = s[i] - bmean[i];
                bm2[i] += d * d;
            }
        }
        let na = self.count as f64;
        let total = na + n;
        for i in 0..dim {
            let delta = bmean[i] - self.mean[i];
            self.mean[i] += delta * n / total;
            self.m2[i] += bm2[i] + delta * delta * na * n / total;
        }
        self.count += states.len() as u64;
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        let std = self.std();
        s.iter().zip(&self.mean).zip(&std).map(|((x, m), d)| (x - m) / d).collect()
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        vec![
            Section::vector(format!("{prefix}.mean"), self.mean.clone()),
            Section::vector(format!("{prefix}.m2"), self.m2.clone()),
            Section::vector(format!("{prefix}.count"), vec![self.count as f64]),
        ]
    }

    pub fn from_blob(blob: &Blob, prefix: &str) -> Result<Self> {
        let mean = blob.get(&format!("{prefix}.mean"))?.values.clone();
        let m2 = blob.get(&format!("{prefix}.m2"))?.values.clone();
        let count = blob.get(&format!("{prefix}.count"))?.values.first().copied().unwrap_or(0.0) as u64;
        if mean.len() != m2.len() {
            return Err(Error::format("normalizer sections differ in length"));
        }
        Ok(Self { mean, m2, count })
    }
}

/// Returns the normalizer after absorbing `states`.
pub fn update_normalizer(normalizer: &Normalizer, states: &[Vec<f64>]) -> Normalizer {
    let mut out = normalizer.clone();
    out.update(states);
    out
}

/// Bounds on the model's standard deviation, in normalized-difference units.
pub const MODEL_STD_RANGE: (f64, f64) = (1e-3, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    net: Mlp,
    log_std: Vec<f64>,
    normalizer: Normalizer,
    action_dim: usize,
}

impl TransitionModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], init_std: f64, rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        let mut net = Mlp::new(&sizes, Activation::Tanh, rng)?;
        // Start close to the identity transition.
        net.scale_output_layer(0.01);
        let log_std = vec![init_std.clamp(MODEL_STD_RANGE.0, MODEL_STD_RANGE.1).ln(); state_dim];
        Ok(Self { net, log_std, normalizer: Normalizer::new(state_dim), action_dim })
    }

    /// Model whose network is identically zero: `s' = s` in the mean.
    pub fn identity(state_dim: usize, action_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(state_dim);
        Ok(Self {
            net: Mlp::zeros(&sizes, Activation::Tanh)?,
            log_std: vec![MODEL_STD_RANGE.0.ln(); state_dim],
            normalizer: Normalizer::new(state_dim),
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn normalizer_mut(&mut self) -> &mut Normalizer {
        &mut self.normalizer
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.log_std.len()
    }

    /// Network parameters followed by the log-std vector.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        if params.len() != n + self.log_std.len() {
            return Err(Error::input("transition parameter vector has the wrong length"));
        }
        self.net.set_params(&params[..n])?;
        self.log_std.copy_from_slice(&params[n..]);
        let (lo, hi) = (MODEL_STD_RANGE.0.ln(), MODEL_STD_RANGE.1.ln());
        self.log_std.iter_mut().for_each(|l| *l = l.clamp(lo, hi));
        Ok(())
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() || a.len() != self.action_dim {
            return Err(Error::input(format!(
                "model expects state/action dims ({}, {}), got ({}, {})",
                self.state_dim(),
                self.action_dim,
                s.len(),
                a.len()
            )));
        }
        Ok(())
    }

    pub fn input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut x = self.normalizer.normalize(s);
        x.extend_from_slice(a);
        x
    }

    /// `(s' − s) / σ_n`.
    pub fn encode_target(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        let std = self.normalizer.std();
        s_next.iter().zip(s).zip(&std).map(|((n, c), d)| (n - c) / d).collect()
    }

    /// `s + σ_n ⊙ y`.
    pub fn decode(&self, s: &[f64], y: &[f64]) -> Vec<f64> {
        let std = self.normalizer.std();
        s.iter().zip(y).zip(&std).map(|((c, v), d)| c + d * v).collect()
    }

    /// Gaussian over the normalized difference.
    pub fn head(&self, s: &[f64], a: &[f64]) -> Result<GaussianHead> {
        self.check(s, a)?;
        Ok(GaussianHead::new(self.net.forward(&self.input(s, a))?, self.log_std.clone(), None))
    }

    pub fn predict_next_state_mean(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check(s, a)?;
        let y = self.net.forward(&self.input(s, a))?;
        Ok(self.decode(s, &y))
    }

    pub fn sample_next_state(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let y = self.head(s, a)?.sample(rng);
        Ok(self.decode(s, &y))
    }

    /// Log-density of the normalized difference. Ratios of this quantity
    /// between two models sharing a normalizer equal ratios of `T_φ(s'|s,a)`.
    pub fn log_prob(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        Ok(self.head(s, a)?.log_prob(&self.encode_target(s, s_next)))
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        let mut out = self.net.to_sections(&format!("{prefix}.net"));
        out.push(Section::vector(format!("{prefix}.log_std"), self.log_std.clone()));
        out.push(Section::vector(format!("{prefix}.action_dim"), vec![self.action_dim as f64]));
        out.extend(self.normalizer.to_sections(&format!("{prefix}.normalizer")));
        out
    }

    pub fn from_blob(blob: &Blob, prefix: &str) -> Result<Self> {
        let net = Mlp::from_blob(blob, &format!("{prefix}.net"))?;
        let log_std = blob.get(&format!("{prefix}.log_std"))?.values.clone();
        let action_dim = blob.get(&format!("{prefix}.action_dim"))?.values[0] as usize;
        let normalizer = Normalizer::from_blob(blob, &format!("{prefix}.normalizer"))?;
        Ok(Self { net, log_std, normalizer, action_dim })
    }
}

/// Anything that can step a state forward: a learned model or, for exact
/// checks, the true dynamics of a tabular environment.
pub trait Dynamics {
    /// Deterministic prediction used for policy rollouts.
    fn mean_next_state(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>>;

    fn sample_next_state(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

impl Dynamics for TransitionModel {
    fn mean_next_state(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.predict_next_state_mean(state, action)
    }

    fn sample_next_state(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        TransitionModel::sample_next_state(self, state, action, rng)
    }
}

/// The "mean" of a categorical next state is taken to be its mode.
impl Dynamics for TabularMDP {
    fn mean_next_state(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.spec(), state, action)?;
        let s = state[0].round();
        if !(s >= 0.0 && (s as usize) < self.n_states()) {
            return Err(Error::input("state index out of range"));
        }
        let a = (action[0].round().max(0.0) as usize).min(self.n_actions() - 1);
        let s = s as usize;
        let row = self.row(s, a);
        let mode = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        Ok(vec![mode as f64])
    }

    fn sample_next_state(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.step(state, action, rng)?.next_state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Subtract the mean reward-to-go at each time index across rollouts.
    Mean,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionLossConfig {
    /// `η`, weight of the `l2` term.
    pub eta: f64,
    pub clip_eps: f64,
    /// Weight on the clipped-surrogate term; 0 disables the adversarial path.
    pub adversarial_weight: f64,
    /// Discount `β` used to accumulate pseudo-rewards along short rollouts.
    pub beta: f64,
    pub baseline: Baseline,
    /// Divide advantages by their standard deviation before the update.
    pub scale_advantages: bool,
}

impl Default for TransitionLossConfig {
    fn default() -> Self {
        Self { eta: 10.0, clip_eps: 0.2, adversarial_weight: 1.0, beta: 0.9, baseline: Baseline::Mean, scale_advantages: true }
    }
}

impl TransitionLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("transition.eta must be a nonnegative number".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("transition.clip_eps must lie in (0,1)".into()));
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return Err(Error::Config("transition.adversarial_weight must be nonnegative".into()));
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(Error::Config("transition.beta must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One model-generated step with the sampling-time log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStep {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub old_log_prob: f64,
}

/// `min(r A, clip(r, 1−ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)
}

/// Value of the clipped surrogate and the number of samples skipped for a
/// non-finite ratio.
pub fn transition_ppo_loss(model: &TransitionModel, batch: &[ModelStep], advantages: &[f64], clip_eps: f64) -> Result<(f64, usize)> {
    let (value, _, skipped) = ppo_value_and_grad(model, batch, advantages, clip_eps, false)?;
    Ok((value, skipped))
}

/// Value, gradient (w.r.t. [`TransitionModel::params`]) and skip count of the
/// surrogate `L_PPO`.
pub(crate) fn ppo_value_and_grad(
    model: &TransitionModel,
    batch: &[ModelStep],
    advantages: &[f64],
    clip_eps: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, usize)> {
    if batch.len() != advantages.len() {
        return Err(Error::input("batch and advantages differ in length"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut gbuf = model.net.grad_buffer();
    let mut glog = vec![0.0; model.log_std.len()];
    for (step, &adv) in batch.iter().zip(advantages) {
        let x = model.input(&step.state, &step.action);
        let cache = model.net.forward_cached(&x)?;
        let head = GaussianHead::new(cache.output().to_vec(), model.log_std.clone(), None);
        let y = model.encode_target(&step.state, &step.next_state);
        let lp = head.log_prob(&y);
        let ratio = (lp - step.old_log_prob).exp();
        if !ratio.is_finite() {
            continue;
        }
        used += 1;
        total += clipped_surrogate(ratio, adv, clip_eps);
        // The unclipped branch is active iff r A ≤ clip(r) A.
        let unclipped = ratio * adv <= ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        if want_grad && unclipped && adv != 0.0 {
            let (dmean, dlog) = head.log_prob_grads(&y);
            let k = adv * ratio;
            let cot: Vec<f64> = dmean.iter().map(|g| k * g).collect();
            model.net.backward_into(&cache, &cot, &mut gbuf);
            glog.iter_mut().zip(&dlog).for_each(|(g, d)| *g += k * d);
        }
    }
    let skipped = batch.len() - used;
    if used == 0 {
        return Ok((0.0, vec![0.0; model.n_params()], skipped));
    }
    let n = used as f64;
    let mut grad = if want_grad { model.net.finish(gbuf) } else { vec![0.0; model.net.n_params()] };
    grad.extend(glog);
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad, skipped))
}

/// Mean over real transitions of the squared error between the predicted and
/// true normalized state differences, averaged over coordinates. Touches the
/// mean head only.
pub fn l2_loss(model: &TransitionModel, real: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<f64> {
    Ok(l2_value_and_grad(model, real, false)?.0)
}

pub(crate) fn l2_value_and_grad(
    model: &TransitionModel,
    real: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if real.is_empty() {
        return Ok((0.0, vec![0.0; model.n_params()]));
    }
    let dim = model.state_dim() as f64;
    let n = real.len() as f64;
    let mut total = 0.0;
    let mut gbuf: GradBuffer = model.net.grad_buffer();
    for (s, a, s_next) in real {
        let cache = model.net.forward_cached(&model.input(s, a))?;
        let target = model.encode_target(s, s_next);
        let diff: Vec<f64> = cache.output().iter().zip(&target).map(|(p, t)| p - t).collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / dim;
        if want_grad {
            let cot: Vec<f64> = diff.iter().map(|d| 2.0 * d / (dim * n)).collect();
            model.net.backward_into(&cache, &cot, &mut gbuf);
        }
    }
    let mut grad = if want_grad { model.net.finish(gbuf) } else { vec![0.0; model.net.n_params()] };
    grad.extend(std::iter::repeat_n(0.0, model.log_std.len()));
    Ok((total / n, grad))
}

/// `−w · L_PPO + η · L_l2`.
pub fn total_transition_loss(l_ppo: f64, l_l2: f64, cfg: &TransitionLossConfig) -> f64 {
    -cfg.adversarial_weight * l_ppo + cfg.eta * l_l2
}

/// Per-step advantages for short model rollouts: discounted pseudo-reward
/// to-go at discount `β`, minus (optionally) the mean to-go at the same
/// time index across rollouts.
pub fn pseudo_advantages(rewards: &[Vec<f64>], beta: f64, baseline: Baseline) -> Vec<Vec<f64>> {
    let mut togo: Vec<Vec<f64>> = rewards
        .iter()
        .map(|r| {
            let mut out = vec![0.0; r.len()];
            let mut acc = 0.0;
            for t in (0..r.len()).rev() {
                acc = r[t] + beta * acc;
                out[t] = acc;
            }
            out
        })
        .collect();
    if baseline == Baseline::Mean {
        let horizon = togo.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..horizon {
            let vals: Vec<f64> = togo.iter().filter_map(|g| g.get(t).copied()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            for g in togo.iter_mut() {
                if let Some(v) = g.get_mut(t) {
                    *v -= mean;
                }
            }
        }
    }
    togo
}

/// Optimizer state for the transition model.
#[derive(Debug, Clone)]
pub struct TransitionTrainer {
    opt: Adam,
}

/// Losses from one transition update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransitionStepStats {
    pub l_ppo: f64,
    pub l_l2: f64,
    pub total: f64,
    pub skipped: usize,
}

impl TransitionTrainer {
    pub fn new(model: &TransitionModel, lr: f64) -> Self {
        Self { opt: Adam::new(model.n_params(), lr) }
    }

    /// One Adam step on `−w · L_PPO(batch) + η · L_l2(real)`. The surrogate is
    /// skipped entirely when `w = 0`.
    pub fn step(
        &mut self,
        model: &mut TransitionModel,
        ppo_batch: &[ModelStep],
        advantages: &[f64],
        real: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
        cfg: &TransitionLossConfig,
    ) -> Result<TransitionStepStats> {
        let mut grad = vec![0.0; model.n_params()];
        let mut stats = TransitionStepStats::default();
        if cfg.adversarial_weight > 0.0 && !ppo_batch.is_empty() {
            let (v, g, skipped) = ppo_value_and_grad(model, ppo_batch, advantages, cfg.clip_eps, true)?;
            stats.l_ppo = v;
            stats.skipped = skipped;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.adversarial_weight * b);
        }
        if cfg.eta > 0.0 {
            let (v, g) = l2_value_and_grad(model, real, true)?;
            stats.l_l2 = v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += cfg.eta * b);
        } else {
            stats.l_l2 = l2_loss(model, real)?;
        }
        stats.total = total_transition_loss(stats.l_ppo, stats.l_l2, cfg);
        if !stats.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite transition loss {}", stats.total)));
        }
        let mut params = model.params();
        self.opt.step(&mut params, &grad);
        model.set_params(&params)?;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn normalizer_two_points() {
        let mut n = Normalizer::new(1);
        n.update(&[vec![0.0], vec![2.0]]);
        assert_eq!(n.mean(), &[1.0]);
        assert_eq!(n.std(), vec![1.0]);
    }

    #[test]
    fn normalizer_streaming_matches_two_pass() {
        let mut rng = seeded(60);
        let data: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.random_range(-5.0..20.0), rng.random::<f64>()]).collect();
        let mut n = Normalizer::new(2);
        for chunk in data.chunks(37) {
            n.update(chunk);
        }
        for d in 0..2 {
            let mean = data.iter().map(|x| x[d]).sum::<f64>() / data.len() as f64;
            let var = data.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / data.len() as f64;
            assert!((n.mean()[d] - mean).abs() < 1e-10);
            assert!((n.std()[d] - var.sqrt()).abs() < 1e-10);
        }
    }

    #[test]
    fn normalizer_empty_update_and_floor() {
        let mut n = Normalizer::new(2);
        let before = n.clone();
        n.update(&[]);
        assert_eq!(n, before);
        assert_eq!(n.std(), vec![1.0, 1.0]);
        n.update(&[vec![3.0, 3.0], vec![3.0, 3.0]]);
        assert_eq!(n.std(), vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn zero_net_is_identity_transition() {
        let m = TransitionModel::identity(2, 1, &[8]).unwrap();
        assert_eq!(m.predict_next_state_mean(&[1.5, -2.0], &[0.3]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn decode_scales_by_normalizer_std() {
        let mut m = TransitionModel::identity(2, 1, &[4]).unwrap();
        m.normalizer_mut().update(&[vec![0.0, 0.0], vec![4.0, 4.0]]);
        assert_eq!(m.normalizer().std(), vec![2.0, 2.0]);
        assert_eq!(m.decode(&[1.0, 2.0], &[0.5, -0.5]), vec![2.0, 1.0]);
    }

    #[test]
    fn target_round_trip() {
        let mut rng = seeded(61);
        let mut m = TransitionModel::new(3, 1, &[8], 0.1, &mut rng).unwrap();
        let states: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        m.normalizer_mut().update(&states);
        for w in states.windows(2) {
            let y = m.encode_target(&w[0], &w[1]);
            let back = m.decode(&w[0], &y);
            for (a, b) in back.iter().zip(&w[1]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn clip_unit_cases() {
        assert_eq!(clipped_surrogate(1.3, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn surrogate_at_snapshot_is_mean_advantage() {
        let mut rng = seeded(62);
        let m = TransitionModel::new(2, 1, &[8], 0.2, &mut rng).unwrap();
        let batch: Vec<ModelStep> = (0..20)
            .map(|_| {
                let s = vec![rng.random::<f64>(), rng.random::<f64>()];
                let a = vec![rng.random::<f64>()];
                let sn = m.sample_next_state(&s, &a, &mut rng).unwrap();
                let lp = m.log_prob(&s, &a, &sn).unwrap();
                ModelStep { state: s, action: a, next_state: sn, old_log_prob: lp }
            })
            .collect();
        let adv: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (v, skipped) = transition_ppo_loss(&m, &batch, &adv, 0.2).unwrap();
        assert_eq!(skipped, 0);
        assert!((v - adv.iter().sum::<f64>() / 20.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences_at_snapshot() {
        let mut rng = seeded(63);
        let mut m = TransitionModel::new(2, 1, &[6], 0.3, &mut rng).unwrap();
        let batch: Vec<ModelStep> = (0..8)
            .map(|_| {
                let s = vec![rng.random::<f64>(), rng.random::<f64>()];
                let a = vec![rng.random::<f64>()];
                let sn = m.sample_next_state(&s, &a, &mut rng).unwrap();
                let lp = m.log_prob(&s, &a, &sn).unwrap();
                ModelStep { state: s, action: a, next_state: sn, old_log_prob: lp }
            })
            .collect();
        let adv: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g, _) = ppo_value_and_grad(&m, &batch, &adv, 0.2, true).unwrap();
        // The unclipped surrogate mean(r A) shares this gradient at r = 1.
        let unclipped = |m: &TransitionModel| -> f64 {
            batch
                .iter()
                .zip(&adv)
                .map(|(b, a)| (m.log_prob(&b.state, &b.action, &b.next_state).unwrap() - b.old_log_prob).exp() * a)
                .sum::<f64>()
                / 8.0
        };
        let base = m.params();
        let h = 1e-6;
        for k in (0..base.len()).step_by(3) {
            let mut p = base.clone();
            p[k] += h;
            m.set_params(&p).unwrap();
            let up = unclipped(&m);
            p[k] -= 2.0 * h;
            m.set_params(&p).unwrap();
            let down = unclipped(&m);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn advantage_cases() {
        let adv = pseudo_advantages(&[vec![2.0; 4], vec![2.0; 4]], 0.7, Baseline::Mean);
        assert!(adv.iter().flatten().all(|a| a.abs() < 1e-12));
        assert_eq!(pseudo_advantages(&[vec![0.37]], 0.9, Baseline::None), vec![vec![0.37]]);
        assert_eq!(pseudo_advantages(&[vec![1.0, 0.0, 0.0]], 0.5, Baseline::None), vec![vec![1.0, 0.0, 0.0]]);
        assert_eq!(pseudo_advantages(&[vec![0.0, 0.0, 1.0]], 0.5, Baseline::None), vec![vec![0.25, 0.5, 1.0]]);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = TransitionLossConfig { eta: 0.0, ..Default::default() };
        assert_eq!(total_transition_loss(0.4, 123.0, &cfg), -0.4);
        let cfg = TransitionLossConfig { eta: 10.0, ..Default::default() };
        assert!((total_transition_loss(0.0, 0.3, &cfg) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn l2_training_recovers_a_linear_map() {
        let mut rng = seeded(64);
        let mut m = TransitionModel::new(2, 1, &[16], 0.1, &mut rng).unwrap();
        let truth = |s: &[f64], a: &[f64]| vec![s[0] + 0.1 * s[1], s[1] + 0.2 * a[0]];
        let data: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..64)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let a = vec![rng.random_range(-1.0..1.0)];
                let n = truth(&s, &a);
                (s, a, n)
            })
            .collect();
        m.normalizer_mut().update(&data.iter().map(|d| d.0.clone()).collect::<Vec<_>>());
        let cfg = TransitionLossConfig { eta: 1.0, adversarial_weight: 0.0, ..Default::default() };
        let mut tr = TransitionTrainer::new(&m, 3e-3);
        let start = l2_loss(&m, &data).unwrap();
        for _ in 0..1500 {
            tr.step(&mut m, &[], &[], &data, &cfg).unwrap();
        }
        let end = l2_loss(&m, &data).unwrap();
        assert!(end < 1e-3 && end < start * 1e-2, "l2 {start} -> {end}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(65);
        let mut m = TransitionModel::new(3, 2, &[5, 5], 0.1, &mut rng).unwrap();
        m.normalizer_mut().update(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, -1.0]]);
        let blob = Blob { sections: m.to_sections("model") };
        let back = TransitionModel::from_blob(&Blob::decode(&blob.encode()).unwrap(), "model").unwrap();
        assert_eq!(back, m);
    }
}

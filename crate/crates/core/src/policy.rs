//! Gaussian policy trained on synthetic rollouts.
//!
//! Updates use the clipped surrogate with a mean-KL early stop in place of
//! exact natural-gradient steps.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::envs::clip_action;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Blob, GaussianHead, Mlp, Section};
use crate::rng::Rng;
use crate::transition::Normalizer;

/// Default sampling-time clamp on the policy standard deviation.
pub const POLICY_STD_RANGE: (f64, f64) = (0.1, 0.3);

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Mlp,
    log_std: Vec<f64>,
    std_range: (f64, f64),
    normalizer: Normalizer,
}

impl Policy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        Self::with_std_range(state_dim, action_dim, hidden, POLICY_STD_RANGE, rng)
    }

    pub fn with_std_range(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        std_range: (f64, f64),
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(std_range.0 > 0.0 && std_range.0 <= std_range.1) {
            return Err(Error::param("policy std range must satisfy 0 < min <= max"));
        }
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut net = Mlp::new(&sizes, Activation::Tanh, rng)?;
        net.scale_output_layer(0.01);
        Ok(Self { net, log_std: vec![std_range.1.ln(); action_dim], std_range, normalizer: Normalizer::new(state_dim) })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn std_range(&self) -> (f64, f64) {
        self.std_range
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) {
        self.normalizer = normalizer;
    }

    /// Overwrites the log-std vector; values are projected into the clamp range.
    pub fn set_log_std(&mut self, log_std: &[f64]) {
        let (lo, hi) = (self.std_range.0.ln(), self.std_range.1.ln());
        self.log_std = log_std.iter().map(|l| l.clamp(lo, hi)).collect();
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params() + self.log_std.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params().to_vec();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        if params.len() != self.n_params() {
            return Err(Error::input("policy parameter vector has the wrong length"));
        }
        self.net.set_params(&params[..n])?;
        let tail = params[n..].to_vec();
        self.set_log_std(&tail);
        Ok(())
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn input(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::input(format!("policy expects state dim {}, got {}", self.state_dim(), state.len())));
        }
        Ok(self.normalizer.normalize(state))
    }

    pub fn head(&self, state: &[f64]) -> Result<GaussianHead> {
        let mean = self.net.forward(&self.input(state)?)?;
        Ok(GaussianHead::new(mean, self.log_std.clone(), Some(self.std_range)))
    }

    /// Raw (pre-clip) Gaussian sample.
    pub fn sample_raw(&self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.head(state)?.sample(rng))
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(&self.input(state)?)
    }

    pub fn log_prob(&self, state: &[f64], raw_action: &[f64]) -> Result<f64> {
        Ok(self.head(state)?.log_prob(raw_action))
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        let mut out = self.net.to_sections(&format!("{prefix}.net"));
        out.push(Section::vector(format!("{prefix}.log_std"), self.log_std.clone()));
        out.push(Section::vector(format!("{prefix}.std_range"), vec![self.std_range.0, self.std_range.1]));
        out.extend(self.normalizer.to_sections(&format!("{prefix}.normalizer")));
        out
    }

    pub fn from_blob(blob: &Blob, prefix: &str) -> Result<Self> {
        let net = Mlp::from_blob(blob, &format!("{prefix}.net"))?;
        let log_std = blob.get(&format!("{prefix}.log_std"))?.values.clone();
        let range = &blob.get(&format!("{prefix}.std_range"))?.values;
        if range.len() != 2 || log_std.len() != net.output_dim() {
            return Err(Error::format("malformed policy sections"));
        }
        let normalizer = Normalizer::from_blob(blob, &format!("{prefix}.normalizer"))?;
        Ok(Self { net, log_std, std_range: (range[0], range[1]), normalizer })
    }
}

/// Immutable, versioned copy of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    policy: Arc<Policy>,
    version: usize,
}

impl PolicySnapshot {
    pub fn new(policy: Policy, version: usize) -> Self {
        Self { policy: Arc::new(policy), version }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn version(&self) -> usize {
        self.version
    }
}

/// Samples an action clipped to the action box; `deterministic` returns the
/// clipped mean.
pub fn policy_act(policy: &Policy, state: &[f64], rng: &mut Rng, deterministic: bool) -> Result<Vec<f64>> {
    let raw = if deterministic { policy.mean_action(state)? } else { policy.sample_raw(state, rng)? };
    Ok(clip_action(&raw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub state: Vec<f64>,
    /// Pre-clip action, used for log-densities.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    /// `true` if the final state is terminal; otherwise the return is
    /// bootstrapped from the value estimate.
    pub terminated: bool,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// State-value regressor used as the advantage baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    net: Mlp,
}

impl ValueFunction {
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut net = Mlp::new(&sizes, Activation::Tanh, rng)?;
        net.scale_output_layer(0.0);
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn predict(&self, normalized_state: &[f64]) -> Result<f64> {
        Ok(self.net.forward(normalized_state)?[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyUpdateConfig {
    pub clip_eps: f64,
    pub kl_max: f64,
    pub entropy_coef: f64,
    /// Discount for advantages; normally the environment's `γ`.
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub passes: usize,
    pub minibatch: usize,
    pub value_lr: f64,
    pub value_passes: usize,
    pub normalize_advantages: bool,
}

impl Default for PolicyUpdateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_max: 0.02,
            entropy_coef: 1e-5,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 3e-4,
            passes: 10,
            minibatch: 256,
            value_lr: 1e-3,
            value_passes: 10,
            normalize_advantages: true,
        }
    }
}

impl PolicyUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_eps > 0.0
            && self.clip_eps < 1.0
            && self.kl_max > 0.0
            && self.entropy_coef >= 0.0
            && (0.0..1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.lr > 0.0
            && self.value_lr > 0.0
            && self.minibatch >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid policy update settings".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PolicyUpdateStats {
    pub mean_return: f64,
    pub kl: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub passes_accepted: usize,
    pub early_stop: bool,
}

/// Generalized advantage estimates and value targets for a batch of rollouts.
pub fn gae(
    rollouts: &[Rollout],
    values: &[Vec<f64>],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut advs = Vec::with_capacity(rollouts.len());
    let mut targets = Vec::with_capacity(rollouts.len());
    for ((r, v), &boot) in rollouts.iter().zip(values).zip(bootstrap) {
        let n = r.steps.len();
        let mut adv = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            let next_v = if t + 1 < n {
                v[t + 1]
            } else if r.terminated {
                0.0
            } else {
                boot
            };
            let delta = r.steps[t].reward + gamma * next_v - v[t];
            acc = delta + gamma * lambda * acc;
            adv[t] = acc;
        }
        targets.push(adv.iter().zip(v).map(|(a, b)| a + b).collect());
        advs.push(adv);
    }
    (advs, targets)
}

struct Sample {
    input: Vec<f64>,
    action: Vec<f64>,
    old_log_prob: f64,
    old_head: GaussianHead,
    advantage: f64,
    target: f64,
}

/// Holds the policy optimizer and the value baseline across updates.
#[derive(Debug, Clone)]
pub struct PolicyLearner {
    pub config: PolicyUpdateConfig,
    pub value: ValueFunction,
    policy_opt: Adam,
    value_opt: Adam,
}

impl PolicyLearner {
    pub fn new(policy: &Policy, config: PolicyUpdateConfig, value_hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let value = ValueFunction::new(policy.state_dim(), value_hidden, rng)?;
        let value_opt = Adam::new(value.net.n_params(), config.value_lr);
        Ok(Self { policy_opt: Adam::new(policy.n_params(), config.lr), value_opt, value, config })
    }

    /// One clipped-surrogate update with KL early stopping. A pass that pushes
    /// the mean `KL(π_old‖π_new)` above `kl_max` is reverted and ends the
    /// update.
    pub fn update(&mut self, policy: &mut Policy, rollouts: &[Rollout], rng: &mut Rng) -> Result<PolicyUpdateStats> {
        let cfg = self.config.clone();
        let mut stats = PolicyUpdateStats::default();
        let rollouts: Vec<&Rollout> = rollouts.iter().filter(|r| !r.steps.is_empty()).collect();
        if rollouts.is_empty() {
            stats.entropy = policy.head(&vec![0.0; policy.state_dim()])?.entropy();
            return Ok(stats);
        }
        stats.mean_return = rollouts.iter().map(|r| r.total_reward()).sum::<f64>() / rollouts.len() as f64;

        let mut values = Vec::with_capacity(rollouts.len());
        let mut bootstrap = Vec::with_capacity(rollouts.len());
        for r in &rollouts {
            let v: Result<Vec<f64>> =
                r.steps.iter().map(|s| self.value.predict(&policy.normalizer.normalize(&s.state))).collect();
            values.push(v?);
            let last = &r.steps[r.steps.len() - 1].next_state;
            bootstrap.push(self.value.predict(&policy.normalizer.normalize(last))?);
        }
        let owned: Vec<Rollout> = rollouts.iter().map(|r| (*r).clone()).collect();
        let (advs, targets) = gae(&owned, &values, &bootstrap, cfg.gamma, cfg.gae_lambda);

        let mut flat_adv: Vec<f64> = advs.iter().flatten().copied().collect();
        if cfg.normalize_advantages {
            let n = flat_adv.len() as f64;
            let mean = flat_adv.iter().sum::<f64>() / n;
            let std = (flat_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            if std > 1e-8 {
                flat_adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
            }
        }
        let mut samples = Vec::with_capacity(flat_adv.len());
        let mut k = 0;
        for (r, tg) in rollouts.iter().zip(&targets) {
            for (step, &target) in r.steps.iter().zip(tg) {
                let input = policy.input(&step.state)?;
                let head = GaussianHead::new(policy.net.forward(&input)?, policy.log_std.clone(), Some(policy.std_range));
                samples.push(Sample {
                    old_log_prob: head.log_prob(&step.action),
                    old_head: head,
                    input,
                    action: step.action.clone(),
                    advantage: flat_adv[k],
                    target,
                });
                k += 1;
            }
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.passes {
            let before = policy.params();
            let opt_before = self.policy_opt.clone();
            order.shuffle(rng);
            for chunk in order.chunks(cfg.minibatch) {
                let grad = self.surrogate_grad(policy, &samples, chunk)?;
                let mut p = policy.params();
                self.policy_opt.step(&mut p, &grad);
                policy.set_params(&p)?;
            }
            let kl = mean_kl(policy, &samples)?;
            if !kl.is_finite() || kl > cfg.kl_max {
                policy.set_params(&before)?;
                self.policy_opt = opt_before;
                stats.early_stop = true;
                break;
            }
            stats.passes_accepted += 1;
        }
        stats.kl = mean_kl(policy, &samples)?;
        stats.entropy = policy.head(&rollouts[0].steps[0].state)?.entropy();
        stats.value_loss = self.fit_value(&samples, rng)?;
        Ok(stats)
    }

    /// Gradient of `−(L_clip + c·H)` over the listed samples.
    fn surrogate_grad(&self, policy: &Policy, samples: &[Sample], idx: &[usize]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut gbuf = policy.net.grad_buffer();
        let mut glog = vec![0.0; policy.log_std.len()];
        let n = idx.len() as f64;
        for &i in idx {
            let s = &samples[i];
            if s.advantage == 0.0 {
                continue;
            }
            let cache = policy.net.forward_cached(&s.input)?;
            let head = GaussianHead::new(cache.output().to_vec(), policy.log_std.clone(), Some(policy.std_range));
            let ratio = (head.log_prob(&s.action) - s.old_log_prob).exp();
            let a = s.advantage;
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            if !(ratio * a <= clipped * a) || !ratio.is_finite() {
                continue;
            }
            let (dmean, dlog) = head.log_prob_grads(&s.action);
            let k = -a * ratio / n;
            let cot: Vec<f64> = dmean.iter().map(|g| k * g).collect();
            policy.net.backward_into(&cache, &cot, &mut gbuf);
            glog.iter_mut().zip(&dlog).for_each(|(g, d)| *g += k * d);
        }
        let mut grad = policy.net.finish(gbuf);
        if cfg.entropy_coef > 0.0 {
            let h = GaussianHead::new(vec![0.0; policy.log_std.len()], policy.log_std.clone(), Some(policy.std_range));
            glog.iter_mut().zip(h.entropy_grad()).for_each(|(g, e)| *g -= cfg.entropy_coef * e);
        }
        grad.extend(glog);
        Ok(grad)
    }

    fn fit_value(&mut self, samples: &[Sample], rng: &mut Rng) -> Result<f64> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..self.config.value_passes {
            order.shuffle(rng);
            for chunk in order.chunks(self.config.minibatch) {
                let mut gbuf = self.value.net.grad_buffer();
                let n = chunk.len() as f64;
                for &i in chunk {
                    let cache = self.value.net.forward_cached(&samples[i].input)?;
                    let d = cache.output()[0] - samples[i].target;
                    self.value.net.backward_into(&cache, &[2.0 * d / n], &mut gbuf);
                }
                let grad = self.value.net.finish(gbuf);
                let opt = &mut self.value_opt;
                self.value.net.update_params(|p| opt.step(p, &grad));
            }
        }
        let mut loss = 0.0;
        for s in samples {
            loss += (self.value.predict(&s.input)? - s.target).powi(2);
        }
        Ok(loss / samples.len() as f64)
    }
}

/// Mean over the batch states of `KL(π_old(·|s) ‖ π(·|s))`.
fn mean_kl(policy: &Policy, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let head = GaussianHead::new(policy.net.forward(&s.input)?, policy.log_std.clone(), Some(policy.std_range));
        total += s.old_head.kl(&head);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Runs one update with a fresh learner and returns the new snapshot.
pub fn policy_update(
    snapshot: &PolicySnapshot,
    rollouts: &[Rollout],
    config: &PolicyUpdateConfig,
    rng: &mut Rng,
) -> Result<(PolicySnapshot, PolicyUpdateStats)> {
    let mut policy = snapshot.policy().clone();
    let mut learner = PolicyLearner::new(&policy, config.clone(), &[64, 64], rng)?;
    let stats = learner.update(&mut policy, rollouts, rng)?;
    Ok((PolicySnapshot::new(policy, snapshot.version() + 1), stats))
}

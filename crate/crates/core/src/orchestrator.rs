//! The outer training loop: collect real data, fit the transition model
//! against a critic over a queue of recent policies, then improve the policy
//! on short synthetic rollouts.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::critic::{critic_step, pseudo_reward, Critic, CriticBatch, CriticConfig, Triple};
use crate::envs::{clip_action, Env, Task};
use crate::error::{Error, Result};
use crate::mdp::{Trajectory, TransitionTuple};
use crate::nn::{Blob, Section};
use crate::policy::{policy_act, Policy, PolicyLearner, PolicySnapshot, PolicyUpdateConfig, Rollout, RolloutStep};
use crate::rng::{stream, streams, Rng};
use crate::transition::{
    pseudo_advantages, Dynamics, ModelStep, Normalizer, TransitionLossConfig, TransitionModel, TransitionTrainer,
};

/// Real transitions gathered in one collection phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    flat: Vec<TransitionTuple>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        let flat = trajectories.iter().flat_map(|t| t.tuples().iter().cloned()).collect();
        Self { trajectories, flat }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn tuple(&self, i: usize) -> &TransitionTuple {
        &self.flat[i]
    }

    pub fn tuples(&self) -> &[TransitionTuple] {
        &self.flat
    }

    /// Start states of every stored transition.
    pub fn states(&self) -> Vec<Vec<f64>> {
        self.flat.iter().map(|t| t.state.clone()).collect()
    }
}

/// The last `q` policy snapshots with the data each one collected.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyQueue {
    capacity: usize,
    entries: Vec<(PolicySnapshot, Dataset)>,
}

impl PolicyQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("queue capacity must be at least 1"));
        }
        Ok(Self { capacity, entries: Vec::with_capacity(capacity + 1) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends and evicts the oldest entry beyond capacity.
    pub fn push(&mut self, snapshot: PolicySnapshot, data: Dataset) {
        self.entries.push((snapshot, data));
        if self.entries.len() > self.capacity {
            self.entries.remove(0);
        }
    }

    pub fn entries(&self) -> &[(PolicySnapshot, Dataset)] {
        &self.entries
    }

    pub fn versions(&self) -> Vec<usize> {
        self.entries.iter().map(|(s, _)| s.version()).collect()
    }

    pub fn latest(&self) -> Option<&(PolicySnapshot, Dataset)> {
        self.entries.last()
    }
}

/// Which real data feeds the `l2` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L2Window {
    /// Only the datasets currently in the policy queue.
    Queue,
    /// Every dataset collected so far.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MIConfig {
    /// Outer iterations; each collects `real_steps_per_iter` real steps.
    pub iterations: usize,
    pub real_steps_per_iter: usize,
    /// `N`: alternating blocks of model and policy epochs per iteration.
    pub n_blocks: usize,
    pub n_transition: usize,
    pub n_policy: usize,
    pub q: usize,
    pub model_horizon: usize,
    /// Synthetic rollouts per policy epoch.
    pub policy_rollouts: usize,
    /// Sampled model rollouts per queued policy per transition epoch.
    pub generator_rollouts: usize,
    /// Real (and fake) triples per critic step.
    pub critic_batch: usize,
    pub l2_batch: usize,
    /// Optimizer steps per transition epoch.
    pub model_minibatches: usize,
    pub model_lr: f64,
    pub model_hidden: Vec<usize>,
    pub model_init_std: f64,
    pub policy_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub l2_window: L2Window,
    pub eval_episodes: usize,
    pub checkpoint_every: usize,
    pub critic: CriticConfig,
    pub transition: TransitionLossConfig,
    pub policy: PolicyUpdateConfig,
}

impl Default for MIConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            real_steps_per_iter: 200,
            n_blocks: 5,
            n_transition: 100,
            n_policy: 10,
            q: 2,
            model_horizon: 20,
            policy_rollouts: 64,
            generator_rollouts: 16,
            critic_batch: 128,
            l2_batch: 128,
            model_minibatches: 4,
            model_lr: 1e-3,
            model_hidden: vec![64, 64],
            model_init_std: 0.1,
            policy_hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            l2_window: L2Window::Queue,
            eval_episodes: 10,
            checkpoint_every: 1,
            critic: CriticConfig::default(),
            transition: TransitionLossConfig { eta: 15.0, ..Default::default() },
            policy: PolicyUpdateConfig { entropy_coef: 1e-5, ..Default::default() },
        }
    }
}

/// Per-environment presets:
/// `(N, η, n_transition, n_policy, horizon, entropy)`.
pub const PROFILES: [(&str, usize, f64, usize, usize, usize, f64); 8] = [
    ("ant", 5, 15.0, 200, 20, 20, 1e-5),
    ("invertedpendulum", 1, 1.0, 100, 50, 15, 1e-5),
    ("hopper", 10, 10.0, 100, 10, 10, 1e-3),
    ("cartpole", 1, 5.0, 100, 50, 15, 1e-5),
    ("swimmer", 2, 10.0, 50, 20, 15, 1e-7),
    ("halfcheetah", 2, 10.0, 200, 20, 20, 1e-7),
    ("pendulum", 5, 15.0, 100, 10, 20, 1e-5),
    ("reacher", 1, 5.0, 100, 50, 15, 1e-5),
];

impl MIConfig {
    /// Defaults with the named profile applied.
    pub fn profile(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase().replace(['-', '_'], "");
        let (_, n, eta, n_transition, n_policy, horizon, entropy) = PROFILES
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| Error::Config(format!("unknown profile `{name}`")))?;
        let mut cfg = Self::default();
        cfg.n_blocks = *n;
        cfg.transition.eta = *eta;
        cfg.n_transition = *n_transition;
        cfg.n_policy = *n_policy;
        cfg.model_horizon = *horizon;
        cfg.policy.entropy_coef = *entropy;
        Ok(cfg)
    }

    pub fn eta(&self) -> f64 {
        self.transition.eta
    }

    pub fn delta(&self) -> f64 {
        self.critic.delta
    }

    pub fn entropy_coef(&self) -> f64 {
        self.policy.entropy_coef
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("real_steps_per_iter", self.real_steps_per_iter),
            ("n_blocks", self.n_blocks),
            ("q", self.q),
            ("model_horizon", self.model_horizon),
            ("policy_rollouts", self.policy_rollouts),
            ("generator_rollouts", self.generator_rollouts),
            ("critic_batch", self.critic_batch),
            ("l2_batch", self.l2_batch),
            ("model_minibatches", self.model_minibatches),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("mi.{name} must be at least 1")));
            }
        }
        if !(self.model_lr > 0.0 && self.model_init_std > 0.0) {
            return Err(Error::Config("mi.model_lr and mi.model_init_std must be positive".into()));
        }
        self.critic.validate()?;
        self.transition.validate()?;
        self.policy.validate()
    }
}

/// Runs `policy` on the real environment for exactly `n_steps` steps,
/// starting a new episode on termination or at the episode length limit.
pub fn collect_real(env: &dyn Env, policy: &Policy, n_steps: usize, rng: &mut Rng) -> Result<Dataset> {
    if n_steps == 0 {
        return Err(Error::param("n_steps must be at least 1"));
    }
    let limit = env.max_episode_length().max(1);
    let mut trajectories = Vec::new();
    let mut current = Trajectory::empty(crate::mdp::Source::Real);
    let mut state = env.reset(rng);
    for _ in 0..n_steps {
        let action = policy_act(policy, &state, rng, false)?;
        let step = env.step(&state, &action, rng)?;
        current.push(TransitionTuple {
            state: state.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            terminal: step.terminal,
        })?;
        if step.terminal || current.len() >= limit {
            trajectories.push(std::mem::replace(&mut current, Trajectory::empty(crate::mdp::Source::Real)));
            state = env.reset(rng);
        } else {
            state = step.next_state;
        }
    }
    if !current.is_empty() {
        trajectories.push(current);
    }
    Ok(Dataset::new(trajectories))
}

/// How the model advances a synthetic rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Mean,
    Sample,
}

/// `count` model rollouts of up to `horizon` steps from start states drawn
/// uniformly from `starts`. Rewards come from the task's known reward
/// function; a rollout ends early on a terminal or non-finite state.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_short_rollouts(
    model: &dyn Dynamics,
    policy: &Policy,
    task: &dyn Task,
    starts: &[Vec<f64>],
    horizon: usize,
    count: usize,
    mode: StepMode,
    rng: &mut Rng,
) -> Result<Vec<Rollout>> {
    if starts.is_empty() {
        return Err(Error::input("no start states to roll out from"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut state = starts[rng.random_range(0..starts.len())].clone();
        let mut steps = Vec::with_capacity(horizon);
        let mut terminated = false;
        for _ in 0..horizon {
            let raw = policy.sample_raw(&state, rng)?;
            let action = clip_action(&raw);
            let reward = task.reward(&state, &action);
            let next = match mode {
                StepMode::Mean => model.mean_next_state(&state, &action)?,
                StepMode::Sample => model.sample_next_state(&state, &action, rng)?,
            };
            if next.iter().any(|v| !v.is_finite()) {
                break;
            }
            steps.push(RolloutStep { state, action: raw, reward, next_state: next.clone() });
            if task.is_terminal(&next) {
                terminated = true;
                break;
            }
            state = next;
        }
        out.push(Rollout { steps, terminated });
    }
    Ok(out)
}

/// Training mode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Mi,
    SupervisedBaseline,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mi => "mi",
            TrainMode::SupervisedBaseline => "supervised-baseline",
        }
    }
}

/// One metrics line. Every record carries every key; fields that do not
/// apply to a phase are null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub mode: String,
    pub seed: u64,
    pub iteration: usize,
    pub block: Option<usize>,
    pub phase: String,
    pub epoch: Option<usize>,
    pub real_steps: u64,
    pub critic_loss: Option<f64>,
    pub critic_gp: Option<f64>,
    pub critic_mean_real: Option<f64>,
    pub critic_mean_fake: Option<f64>,
    pub l_ppo: Option<f64>,
    pub l_l2: Option<f64>,
    pub transition_loss: Option<f64>,
    pub skipped: Option<usize>,
    pub policy_return: Option<f64>,
    pub policy_kl: Option<f64>,
    pub policy_entropy: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
}

impl MetricRecord {
    fn new(mode: TrainMode, seed: u64, iteration: usize, phase: &str, real_steps: u64) -> Self {
        Self {
            mode: mode.name().to_string(),
            seed,
            iteration,
            block: None,
            phase: phase.to_string(),
            epoch: None,
            real_steps,
            critic_loss: None,
            critic_gp: None,
            critic_mean_real: None,
            critic_mean_fake: None,
            l_ppo: None,
            l_l2: None,
            transition_loss: None,
            skipped: None,
            policy_return: None,
            policy_kl: None,
            policy_entropy: None,
            eval_return_mean: None,
            eval_return_std: None,
        }
    }
}

/// A learning-curve point: evaluation return against cumulative real steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub real_steps: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

/// Receives run output as it is produced.
pub trait RunSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()>;

    fn checkpoint(&mut self, _iteration: usize, _blob: &Blob) -> Result<()> {
        Ok(())
    }

    /// Called with the full learner state before a run aborts.
    fn dump(&mut self, _blob: &Blob, _reason: &str) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<(usize, Blob)>,
    pub dumps: Vec<(String, Blob)>,
}

impl RunSink for MemorySink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        self.metrics.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, iteration: usize, blob: &Blob) -> Result<()> {
        self.checkpoints.push((iteration, blob.clone()));
        Ok(())
    }

    fn dump(&mut self, blob: &Blob, reason: &str) -> Result<()> {
        self.dumps.push((reason.to_string(), blob.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub curve: Vec<CurvePoint>,
    pub policy: Policy,
    pub model: TransitionModel,
    pub real_steps: u64,
}

/// Mean and population std of deterministic-mode returns over `episodes`
/// fresh episodes. The evaluation stream is recreated on every call.
pub fn evaluate(env: &dyn Env, policy: &Policy, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = stream(seed, streams::EVAL);
    let limit = env.max_episode_length().max(1);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut total = 0.0;
        for _ in 0..limit {
            let action = policy_act(policy, &state, &mut rng, true)?;
            let step = env.step(&state, &action, &mut rng)?;
            total += step.reward;
            if step.terminal {
                break;
            }
            state = step.next_state;
        }
        returns.push(total);
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

fn l2_pool<'a>(window: L2Window, queue: &'a PolicyQueue, history: &'a [Dataset]) -> Vec<&'a TransitionTuple> {
    match window {
        L2Window::Queue => queue.entries.iter().flat_map(|(_, d)| d.tuples()).collect(),
        L2Window::All => history.iter().flat_map(|d| d.tuples()).collect(),
    }
}

struct Learner {
    seed: u64,
    cfg: MIConfig,
    model: TransitionModel,
    trainer: TransitionTrainer,
    policy: Policy,
    policy_learner: PolicyLearner,
    critic: Option<Critic>,
    queue: PolicyQueue,
    history: Vec<Dataset>,
    normalizer: Normalizer,
    version: usize,
    model_rng: Rng,
    critic_rng: Rng,
    policy_rng: Rng,
}

impl Learner {
    fn new(task: &dyn Task, cfg: &MIConfig, mode: TrainMode, seed: u64) -> Result<Self> {
        let spec = task.spec();
        let (s, a) = (spec.state_dim, spec.action_dim);
        let mut init = stream(seed, streams::INIT);
        let model = TransitionModel::new(s, a, &cfg.model_hidden, cfg.model_init_std, &mut init)?;
        let policy = Policy::new(s, a, &cfg.policy_hidden, &mut init)?;
        let policy_learner = PolicyLearner::new(&policy, cfg.policy.clone(), &cfg.value_hidden, &mut init)?;
        // Created last so both modes share every earlier draw.
        let critic = match mode {
            TrainMode::Mi if cfg.transition.adversarial_weight > 0.0 => Some(Critic::new(s, a, cfg.critic.clone(), &mut init)?),
            _ => None,
        };
        Ok(Self {
            seed,
            trainer: TransitionTrainer::new(&model, cfg.model_lr),
            cfg: cfg.clone(),
            model,
            policy,
            policy_learner,
            critic,
            queue: PolicyQueue::new(cfg.q)?,
            history: Vec::new(),
            normalizer: Normalizer::new(s),
            version: 0,
            model_rng: stream(seed, streams::MODEL),
            critic_rng: stream(seed, streams::CRITIC),
            policy_rng: stream(seed, streams::POLICY),
        })
    }

    /// Collects, updates the shared normalizer, and queues the snapshot.
    fn collect(&mut self, env: &dyn Env, rng: &mut Rng) -> Result<()> {
        let data = collect_real(env, &self.policy, self.cfg.real_steps_per_iter, rng)?;
        let mut states = data.states();
        states.extend(data.tuples().iter().map(|t| t.next_state.clone()));
        self.normalizer.update(&states);
        *self.model.normalizer_mut() = self.normalizer.clone();
        self.policy.set_normalizer(self.normalizer.clone());
        if let Some(c) = self.critic.as_mut() {
            c.set_normalizer(self.normalizer.clone());
        }
        self.version += 1;
        self.queue.push(PolicySnapshot::new(self.policy.clone(), self.version), data.clone());
        if self.cfg.l2_window == L2Window::All {
            self.history.push(data);
        }
        Ok(())
    }

    fn start_states(&self) -> Vec<Vec<f64>> {
        self.queue.entries.iter().flat_map(|(_, d)| d.states()).collect()
    }

    /// Sampled model rollouts under every queued policy, grouped per rollout.
    fn generator_rollouts(&mut self, task: &dyn Task) -> Result<Vec<(usize, Vec<ModelStep>)>> {
        let mut out = Vec::new();
        let entries: Vec<(PolicySnapshot, Vec<Vec<f64>>)> =
            self.queue.entries.iter().map(|(p, d)| (p.clone(), d.states())).collect();
        for (j, (snapshot, starts)) in entries.iter().enumerate() {
            let rollouts = synthesize_short_rollouts(
                &self.model,
                snapshot.policy(),
                task,
                starts,
                self.cfg.model_horizon,
                self.cfg.generator_rollouts,
                StepMode::Sample,
                &mut self.model_rng,
            )?;
            for r in rollouts {
                let steps: Result<Vec<ModelStep>> = r
                    .steps
                    .into_iter()
                    .map(|s| {
                        let action = clip_action(&s.action);
                        let old_log_prob = self.model.log_prob(&s.state, &action, &s.next_state)?;
                        Ok(ModelStep { state: s.state, action, next_state: s.next_state, old_log_prob })
                    })
                    .collect();
                out.push((j, steps?));
            }
        }
        Ok(out)
    }

    fn real_triples(&mut self, n: usize) -> Vec<(Triple, usize)> {
        let entries = &self.queue.entries;
        (0..n)
            .map(|_| {
                let j = self.critic_rng.random_range(0..entries.len());
                let d = &entries[j].1;
                let t = d.tuple(self.critic_rng.random_range(0..d.len()));
                (Triple { state: t.state.clone(), action: t.action.clone(), next_state: t.next_state.clone() }, j)
            })
            .collect()
    }

    fn transition_epoch(&mut self, task: &dyn Task, rec: &mut MetricRecord) -> Result<()> {
        let adversarial = self.critic.is_some() && self.cfg.transition.adversarial_weight > 0.0;
        let mut ppo_batch: Vec<ModelStep> = Vec::new();
        let mut advantages: Vec<f64> = Vec::new();
        if adversarial {
            let gen = self.generator_rollouts(task)?;
            let fakes: Vec<(Triple, usize)> = gen
                .iter()
                .flat_map(|(j, steps)| {
                    steps.iter().map(move |s| {
                        (Triple { state: s.state.clone(), action: s.action.clone(), next_state: s.next_state.clone() }, *j)
                    })
                })
                .collect();
            if fakes.is_empty() {
                return Err(Error::Numerical("model produced no finite rollout steps".into()));
            }
            let n_critic = self.cfg.critic.n_critic;
            let mut last = None;
            for _ in 0..n_critic {
                let real = self.real_triples(self.cfg.critic_batch);
                let m = self.cfg.critic_batch.min(fakes.len());
                let picks = index::sample(&mut self.critic_rng, fakes.len(), m).into_vec();
                let batch = CriticBatch {
                    real_source: real.iter().map(|r| r.1).collect(),
                    real: real.into_iter().map(|r| r.0).collect(),
                    fake_source: picks.iter().map(|&i| fakes[i].1).collect(),
                    fake: picks.iter().map(|&i| fakes[i].0.clone()).collect(),
                };
                let critic = self.critic.as_mut().expect("adversarial mode has a critic");
                last = Some(critic_step(critic, &batch, &mut self.critic_rng)?);
            }
            if let Some(s) = last {
                rec.critic_loss = Some(s.loss);
                rec.critic_gp = Some(s.gp);
                rec.critic_mean_real = Some(s.mean_real);
                rec.critic_mean_fake = Some(s.mean_fake);
            }
            let critic = self.critic.as_ref().expect("adversarial mode has a critic");
            let mut rewards = Vec::with_capacity(gen.len());
            for (_, steps) in &gen {
                let r: Result<Vec<f64>> =
                    steps.iter().map(|s| pseudo_reward(critic, &s.state, &s.action, &s.next_state)).collect();
                rewards.push(r?);
            }
            let adv = pseudo_advantages(&rewards, self.cfg.transition.beta, self.cfg.transition.baseline);
            for ((_, steps), a) in gen.into_iter().zip(adv) {
                ppo_batch.extend(steps);
                advantages.extend(a);
            }
            if self.cfg.transition.scale_advantages {
                let n = advantages.len() as f64;
                let mean = advantages.iter().sum::<f64>() / n;
                let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
                if std > 1e-8 {
                    advantages.iter_mut().for_each(|a| *a /= std);
                }
            }
        }

        let k = self.cfg.model_minibatches;
        let mut order: Vec<usize> = (0..ppo_batch.len()).collect();
        if adversarial {
            use rand::seq::SliceRandom;
            order.shuffle(&mut self.model_rng);
        }
        let chunk = ppo_batch.len().div_ceil(k).max(1);
        let mut sums = (0.0, 0.0, 0.0, 0usize);
        for m in 0..k {
            let idx: &[usize] = if order.is_empty() { &[] } else { &order[(m * chunk).min(order.len())..((m + 1) * chunk).min(order.len())] };
            let batch: Vec<ModelStep> = idx.iter().map(|&i| ppo_batch[i].clone()).collect();
            let adv: Vec<f64> = idx.iter().map(|&i| advantages[i]).collect();
            let real: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = {
                let pool = l2_pool(self.cfg.l2_window, &self.queue, &self.history);
                let rng = &mut self.model_rng;
                (0..self.cfg.l2_batch.min(pool.len()))
                    .map(|_| {
                        let t = pool[rng.random_range(0..pool.len())];
                        (t.state.clone(), t.action.clone(), t.next_state.clone())
                    })
                    .collect()
            };
            let stats = self.trainer.step(&mut self.model, &batch, &adv, &real, &self.cfg.transition)?;
            sums.0 += stats.l_ppo / k as f64;
            sums.1 += stats.l_l2 / k as f64;
            sums.2 += stats.total / k as f64;
            sums.3 += stats.skipped;
        }
        if adversarial {
            rec.l_ppo = Some(sums.0);
            rec.skipped = Some(sums.3);
        }
        rec.l_l2 = Some(sums.1);
        rec.transition_loss = Some(sums.2);
        Ok(())
    }

    fn policy_epoch(&mut self, task: &dyn Task, rec: &mut MetricRecord) -> Result<()> {
        let starts = self.start_states();
        let rollouts = synthesize_short_rollouts(
            &self.model,
            &self.policy,
            task,
            &starts,
            self.cfg.model_horizon,
            self.cfg.policy_rollouts,
            StepMode::Mean,
            &mut self.policy_rng,
        )?;
        let stats = self.policy_learner.update(&mut self.policy, &rollouts, &mut self.policy_rng)?;
        if !stats.value_loss.is_finite() || !stats.kl.is_finite() {
            return Err(Error::Numerical("non-finite policy statistics".into()));
        }
        rec.policy_return = Some(stats.mean_return);
        rec.policy_kl = Some(stats.kl);
        rec.policy_entropy = Some(stats.entropy);
        Ok(())
    }

    fn state_blob(&self) -> Blob {
        let mut blob = Blob::default();
        blob.extend(self.model.to_sections("model"));
        blob.extend(self.policy.to_sections("policy"));
        if let Some(c) = &self.critic {
            blob.extend(c.to_sections("critic"));
        }
        blob.push(Section::vector("meta.version", vec![self.version as f64]));
        blob.push(Section::vector("meta.seed", vec![self.seed as f64]));
        blob
    }
}

fn run(env: &dyn Env, cfg: &MIConfig, mode: TrainMode, seed: u64, sink: &mut dyn RunSink) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if mode == TrainMode::SupervisedBaseline {
        cfg.transition.adversarial_weight = 0.0;
    }
    let counter = crate::envs::CountingEnv::new(env);
    let task: &dyn Task = env;
    let mut learner = Learner::new(task, &cfg, mode, seed)?;
    let mut env_rng = stream(seed, streams::ENV);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        learner.collect(&counter, &mut env_rng)?;
        let real_steps = counter.steps();
        let mut rec = MetricRecord::new(mode, seed, iteration, "collect", real_steps);
        rec.epoch = None;
        sink.metric(&rec)?;
        let result = (|| -> Result<()> {
            for block in 0..cfg.n_blocks {
                for epoch in 0..cfg.n_transition {
                    let mut rec = MetricRecord::new(mode, seed, iteration, "transition", real_steps);
                    rec.block = Some(block);
                    rec.epoch = Some(epoch);
                    learner.transition_epoch(task, &mut rec)?;
                    sink.metric(&rec)?;
                }
                for epoch in 0..cfg.n_policy {
                    let mut rec = MetricRecord::new(mode, seed, iteration, "policy", real_steps);
                    rec.block = Some(block);
                    rec.epoch = Some(epoch);
                    learner.policy_epoch(task, &mut rec)?;
                    sink.metric(&rec)?;
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            sink.dump(&learner.state_blob(), &e.to_string())?;
            return Err(e);
        }
        // Inner loops only see the task; the real step count cannot move.
        assert_eq!(counter.steps(), real_steps, "inner loops stepped the real environment");
        let (mean, std) = evaluate(env, &learner.policy, cfg.eval_episodes, seed)?;
        if !mean.is_finite() {
            sink.dump(&learner.state_blob(), "non-finite evaluation return")?;
            return Err(Error::Numerical("non-finite evaluation return".into()));
        }
        let mut rec = MetricRecord::new(mode, seed, iteration, "eval", real_steps);
        rec.eval_return_mean = Some(mean);
        rec.eval_return_std = Some(std);
        sink.metric(&rec)?;
        curve.push(CurvePoint { real_steps, eval_return_mean: mean, eval_return_std: std });
        if cfg.checkpoint_every > 0 && (iteration % cfg.checkpoint_every == 0 || iteration == cfg.iterations) {
            sink.checkpoint(iteration, &learner.state_blob())?;
        }
    }
    Ok(RunOutcome { curve, real_steps: counter.steps(), policy: learner.policy, model: learner.model })
}

/// Model imitation: the transition model minimizes `−L_PPO + η·L_l2` against
/// a critic trained on the queue mixture.
pub fn mi_train(env: &dyn Env, cfg: &MIConfig, seed: u64, sink: &mut dyn RunSink) -> Result<RunOutcome> {
    run(env, cfg, TrainMode::Mi, seed, sink)
}

/// The same loop with the adversarial term removed: `η·L_l2` only.
pub fn baseline_supervised(env: &dyn Env, cfg: &MIConfig, seed: u64, sink: &mut dyn RunSink) -> Result<RunOutcome> {
    run(env, cfg, TrainMode::SupervisedBaseline, seed, sink)
}

/// Dispatches on `mode`.
pub fn train(env: &dyn Env, cfg: &MIConfig, mode: TrainMode, seed: u64, sink: &mut dyn RunSink) -> Result<RunOutcome> {
    run(env, cfg, mode, seed, sink)
}

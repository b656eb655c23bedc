//! WGAN critic `f(s, a, s')` over transition triples.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::Task;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Blob, Mlp, Section};
use crate::orchestrator::{synthesize_short_rollouts, PolicyQueue, StepMode};
use crate::rng::Rng;
use crate::transition::{Dynamics, Normalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMode {
    Interpolated,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    /// Truncation level `δ`.
    pub delta: f64,
    pub gp_weight: f64,
    pub gp_mode: GpMode,
    pub spectral_norm: bool,
    pub lr: f64,
    /// Critic steps per transition epoch.
    pub n_critic: usize,
    pub hidden: Vec<usize>,
    pub power_iters: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            gp_weight: 10.0,
            gp_mode: GpMode::Interpolated,
            spectral_norm: true,
            lr: 1e-4,
            n_critic: 5,
            hidden: vec![64, 64, 64],
            power_iters: 1,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config("critic.delta must be positive".into()));
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return Err(Error::Config("critic.gp_weight must be nonnegative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("critic.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

/// Real and generated triples, each tagged with the index of the queued
/// policy it came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriticBatch {
    pub real: Vec<Triple>,
    pub fake: Vec<Triple>,
    pub real_source: Vec<usize>,
    pub fake_source: Vec<usize>,
}

impl CriticBatch {
    fn check(&self) -> Result<()> {
        if self.real.is_empty() || self.fake.is_empty() {
            return Err(Error::input("critic batch needs both real and fake triples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CriticStats {
    pub loss: f64,
    pub hinge: f64,
    pub gp: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    net: Mlp,
    normalizer: Normalizer,
    opt: Adam,
    pub config: CriticConfig,
}

impl Critic {
    pub fn new(state_dim: usize, action_dim: usize, config: CriticConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![2 * state_dim + action_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, Activation::Relu, rng)?;
        Self::from_net(net, Normalizer::new(state_dim), config, rng)
    }

    /// Wraps an existing scalar network; `normalizer` fixes the state scale.
    pub fn from_net(mut net: Mlp, normalizer: Normalizer, config: CriticConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if net.output_dim() != 1 || net.input_dim() <= 2 * normalizer.dim() {
            return Err(Error::param("critic network must map (s, a, s') to a scalar"));
        }
        if config.spectral_norm {
            net.enable_spectral_norm_all(20, rng);
        }
        let opt = Adam::with_betas(net.n_params(), config.lr, 0.5, 0.9);
        Ok(Self { net, normalizer, opt, config })
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

    /// `[normalize(s), a, normalize(s')]`.
    pub fn encode(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> Vec<f64> {
        let mut x = self.normalizer.normalize(state);
        x.extend_from_slice(action);
        x.extend(self.normalizer.normalize(next_state));
        x
    }

    fn encode_triple(&self, t: &Triple) -> Result<Vec<f64>> {
        let x = self.encode(&t.state, &t.action, &t.next_state);
        if x.len() != self.net.input_dim() {
            return Err(Error::input(format!("critic expects input dim {}, got {}", self.net.input_dim(), x.len())));
        }
        Ok(x)
    }

    pub fn score(&self, t: &Triple) -> Result<f64> {
        Ok(self.net.forward(&self.encode_triple(t)?)?[0])
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        let mut out = self.net.to_sections(&format!("{prefix}.net"));
        out.extend(self.normalizer.to_sections(&format!("{prefix}.normalizer")));
        out
    }

    pub fn from_blob(blob: &Blob, prefix: &str, config: CriticConfig) -> Result<Self> {
        let net = Mlp::from_blob(blob, &format!("{prefix}.net"))?;
        let normalizer = Normalizer::from_blob(blob, &format!("{prefix}.normalizer"))?;
        let opt = Adam::with_betas(net.n_params(), config.lr, 0.5, 0.9);
        Ok(Self { net, normalizer, opt, config })
    }
}

/// Raw, untruncated critic value used as the transition learner's reward.
pub fn pseudo_reward(critic: &Critic, state: &[f64], action: &[f64], next_state: &[f64]) -> Result<f64> {
    Ok(critic.net.forward(&critic.encode(state, action, next_state))?[0])
}

fn mean_scores(critic: &Critic, triples: &[Triple]) -> Result<Vec<f64>> {
    triples.iter().map(|t| critic.score(t)).collect()
}

/// `mean_real max(0, δ − f) + mean_fake max(0, δ + f)`.
pub fn hinge_critic_loss(critic: &Critic, batch: &CriticBatch, delta: f64) -> Result<f64> {
    batch.check()?;
    let real = mean_scores(critic, &batch.real)?;
    let fake = mean_scores(critic, &batch.fake)?;
    Ok(real.iter().map(|f| (delta - f).max(0.0)).sum::<f64>() / real.len() as f64
        + fake.iter().map(|f| (delta + f).max(0.0)).sum::<f64>() / fake.len() as f64)
}

/// `mean_real min(δ, f) + mean_fake min(δ, −f)`, the truncated objective the
/// critic maximizes.
pub fn truncated_objective(critic: &Critic, batch: &CriticBatch, delta: f64) -> Result<f64> {
    batch.check()?;
    let real = mean_scores(critic, &batch.real)?;
    let fake = mean_scores(critic, &batch.fake)?;
    Ok(real.iter().map(|f| f.min(delta)).sum::<f64>() / real.len() as f64
        + fake.iter().map(|f| (-f).min(delta)).sum::<f64>() / fake.len() as f64)
}

/// Index pairs `(real, fake)`. Equal counts pair in order; otherwise each
/// element of the smaller side gets a distinct random partner.
fn pairing(n_real: usize, n_fake: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    if n_real == n_fake {
        return (0..n_real).map(|i| (i, i)).collect();
    }
    let m = n_real.min(n_fake);
    let picked = index::sample(rng, n_real.max(n_fake), m).into_vec();
    if n_real < n_fake {
        (0..m).zip(picked).collect()
    } else {
        picked.into_iter().zip(0..m).collect()
    }
}

/// Interpolated inputs `u·real + (1−u)·fake`, `u ~ U[0, 1]`.
fn interpolates(critic: &Critic, batch: &CriticBatch, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    pairing(batch.real.len(), batch.fake.len(), rng)
        .into_iter()
        .map(|(i, j)| {
            let xr = critic.encode_triple(&batch.real[i])?;
            let xf = critic.encode_triple(&batch.fake[j])?;
            let u: f64 = rng.random();
            Ok(xr.iter().zip(&xf).map(|(r, f)| u * r + (1.0 - u) * f).collect())
        })
        .collect()
}

/// Mean `(‖∇ₓ f(x̃)‖ − 1)²` over interpolates.
pub fn gradient_penalty(critic: &Critic, batch: &CriticBatch, rng: &mut Rng) -> Result<f64> {
    batch.check()?;
    let xs = interpolates(critic, batch, rng)?;
    let mut total = 0.0;
    for x in &xs {
        let cache = critic.net.forward_cached(x)?;
        let g = critic.net.input_gradient(&cache, &[1.0]);
        total += (norm(&g) - 1.0).powi(2);
    }
    Ok(total / xs.len() as f64)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One optimizer step on `hinge + λ·GP`.
pub fn critic_step(critic: &mut Critic, batch: &CriticBatch, rng: &mut Rng) -> Result<CriticStats> {
    batch.check()?;
    if critic.config.spectral_norm {
        critic.net.refresh_spectral(critic.config.power_iters);
    }
    let delta = critic.config.delta;
    let net = &critic.net;
    let mut gbuf = net.grad_buffer();
    let mut stats = CriticStats::default();
    let n_real = batch.real.len() as f64;
    for t in &batch.real {
        let cache = net.forward_cached(&critic.encode_triple(t)?)?;
        let f = cache.output()[0];
        stats.mean_real += f / n_real;
        stats.hinge += (delta - f).max(0.0) / n_real;
        if f < delta {
            net.backward_into(&cache, &[-1.0 / n_real], &mut gbuf);
        }
    }
    let n_fake = batch.fake.len() as f64;
    for t in &batch.fake {
        let cache = net.forward_cached(&critic.encode_triple(t)?)?;
        let f = cache.output()[0];
        stats.mean_fake += f / n_fake;
        stats.hinge += (delta + f).max(0.0) / n_fake;
        if f > -delta {
            net.backward_into(&cache, &[1.0 / n_fake], &mut gbuf);
        }
    }
    if critic.config.gp_mode == GpMode::Interpolated && critic.config.gp_weight > 0.0 {
        let xs = interpolates(critic, batch, rng)?;
        let n = xs.len() as f64;
        for x in &xs {
            let cache = net.forward_cached(x)?;
            let g = net.input_gradient(&cache, &[1.0]);
            let gn = norm(&g);
            stats.gp += (gn - 1.0).powi(2) / n;
            if gn > 0.0 {
                let coef = critic.config.gp_weight * 2.0 * (gn - 1.0) / gn / n;
                let tc = net.forward_tangent(x, &g)?;
                net.backward_tangent(&tc, &[coef], &mut gbuf);
            }
        }
    }
    stats.loss = stats.hinge + critic.config.gp_weight * stats.gp;
    let grad = net.finish(gbuf);
    if !stats.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite critic loss {}", stats.loss)));
    }
    let opt = &mut critic.opt;
    critic.net.update_params(|p| opt.step(p, &grad));
    Ok(stats)
}

/// Number of real and generated triples in a critic batch, and the model
/// rollout length used to generate the latter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSizes {
    pub real: usize,
    pub fake: usize,
    pub horizon: usize,
}

/// Draws real triples uniformly over the datasets in the queue (weight `1/q`
/// each) and fake triples from sampled model rollouts under each queued
/// policy, again `1/q` each.
pub fn assemble_mixture_batch(
    queue: &PolicyQueue,
    model: &dyn Dynamics,
    task: &dyn Task,
    rng: &mut Rng,
    sizes: BatchSizes,
) -> Result<CriticBatch> {
    if queue.is_empty() {
        return Err(Error::InvalidState("policy queue is empty".into()));
    }
    if sizes.real == 0 || sizes.fake == 0 || sizes.horizon == 0 {
        return Err(Error::param("batch sizes and horizon must be positive"));
    }
    let entries = queue.entries();
    let mut batch = CriticBatch::default();
    for _ in 0..sizes.real {
        let j = rng.random_range(0..entries.len());
        let data = &entries[j].1;
        let t = data.tuple(rng.random_range(0..data.len()));
        batch.real.push(Triple { state: t.state.clone(), action: t.action.clone(), next_state: t.next_state.clone() });
        batch.real_source.push(j);
    }
    let q = entries.len();
    for (j, (snapshot, data)) in entries.iter().enumerate() {
        let want = sizes.fake / q + usize::from(j < sizes.fake % q);
        let mut got = 0;
        while got < want {
            let count = (want - got).div_ceil(sizes.horizon);
            let rollouts = synthesize_short_rollouts(
                model,
                snapshot.policy(),
                task,
                &data.states(),
                sizes.horizon,
                count,
                StepMode::Sample,
                rng,
            )?;
            for step in rollouts.iter().flat_map(|r| &r.steps) {
                if got == want {
                    break;
                }
                batch.fake.push(Triple {
                    state: step.state.clone(),
                    action: crate::envs::clip_action(&step.action),
                    next_state: step.next_state.clone(),
                });
                batch.fake_source.push(j);
                got += 1;
            }
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_triples(n: usize, offset: f64, rng: &mut Rng) -> Vec<Triple> {
        (0..n)
            .map(|_| Triple {
                state: vec![offset + rng.random::<f64>(), rng.random::<f64>()],
                action: vec![rng.random_range(-1.0..1.0)],
                next_state: vec![offset + rng.random::<f64>(), rng.random::<f64>()],
            })
            .collect()
    }

    fn batch(n_real: usize, n_fake: usize, rng: &mut Rng) -> CriticBatch {
        CriticBatch {
            real: random_triples(n_real, 2.0, rng),
            fake: random_triples(n_fake, -2.0, rng),
            real_source: vec![0; n_real],
            fake_source: vec![0; n_fake],
        }
    }

    fn plain(net: Mlp) -> Critic {
        let cfg = CriticConfig { spectral_norm: false, ..Default::default() };
        Critic::from_net(net, Normalizer::new(2), cfg, &mut seeded(0)).unwrap()
    }

    #[test]
    fn hinge_of_zero_critic_is_two() {
        let mut rng = seeded(80);
        let c = plain(Mlp::zeros(&[5, 4, 1], Activation::Relu).unwrap());
        assert_eq!(hinge_critic_loss(&c, &batch(7, 9, &mut rng), 1.0).unwrap(), 2.0);
    }

    #[test]
    fn hinge_is_zero_when_separated() {
        // f = x[0] picks out the (shifted) state coordinate.
        let c = plain(Mlp::linear(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0]).unwrap());
        let t = |s: f64| Triple { state: vec![s, 0.0], action: vec![0.0], next_state: vec![0.0, 0.0] };
        let b = CriticBatch { real: vec![t(2.0)], fake: vec![t(-2.0)], real_source: vec![0], fake_source: vec![0] };
        assert_eq!(hinge_critic_loss(&c, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn truncated_plus_hinge_is_two_delta() {
        let mut rng = seeded(81);
        for k in 0..20 {
            let c = Critic::new(2, 1, CriticConfig { hidden: vec![8, 8], ..Default::default() }, &mut rng).unwrap();
            let mut b = batch(10 + k, 13, &mut rng);
            // Scale up so both branches of the hinge occur.
            b.real.iter_mut().chain(b.fake.iter_mut()).for_each(|t| t.action[0] *= 30.0);
            let delta = 0.05 + k as f64 * 0.1;
            let sum = hinge_critic_loss(&c, &b, delta).unwrap() + truncated_objective(&c, &b, delta).unwrap();
            assert!((sum - 2.0 * delta).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_is_nonnegative_and_rejects_empty() {
        let mut rng = seeded(82);
        let c = Critic::new(2, 1, CriticConfig::default(), &mut rng).unwrap();
        assert!(hinge_critic_loss(&c, &batch(5, 5, &mut rng), 1.0).unwrap() >= 0.0);
        assert!(hinge_critic_loss(&c, &batch(0, 5, &mut rng), 1.0).is_err());
    }

    #[test]
    fn penalty_unit_linear_and_constant() {
        let mut rng = seeded(83);
        let b = batch(6, 4, &mut rng);
        let w = [0.6, 0.0, 0.0, 0.8, 0.0];
        let lin = plain(Mlp::linear(&w, &[0.3]).unwrap());
        assert!(gradient_penalty(&lin, &b, &mut rng).unwrap().abs() < 1e-24);
        let zero = plain(Mlp::zeros(&[5, 3, 1], Activation::Relu).unwrap());
        assert_eq!(gradient_penalty(&zero, &b, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn penalty_matches_finite_differences() {
        let mut rng = seeded(84);
        let cfg = CriticConfig { hidden: vec![16, 16], ..Default::default() };
        let c = Critic::new(2, 1, cfg, &mut rng).unwrap();
        let b = batch(8, 8, &mut rng);
        let mut r1 = seeded(5);
        let gp = gradient_penalty(&c, &b, &mut r1).unwrap();
        let mut r2 = seeded(5);
        let xs = interpolates(&c, &b, &mut r2).unwrap();
        let h = 1e-6;
        let fd: f64 = xs
            .iter()
            .map(|x| {
                let g: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let (mut up, mut dn) = (x.clone(), x.clone());
                        up[i] += h;
                        dn[i] -= h;
                        (c.net().forward(&up).unwrap()[0] - c.net().forward(&dn).unwrap()[0]) / (2.0 * h)
                    })
                    .collect();
                (norm(&g) - 1.0).powi(2)
            })
            .sum::<f64>()
            / xs.len() as f64;
        assert!((gp - fd).abs() < 1e-3, "{gp} vs {fd}");
    }

    #[test]
    fn mismatched_counts_pair_distinct_partners() {
        let mut rng = seeded(85);
        let p = pairing(3, 10, &mut rng);
        assert_eq!(p.len(), 3);
        let mut fakes: Vec<usize> = p.iter().map(|x| x.1).collect();
        fakes.sort();
        fakes.dedup();
        assert_eq!(fakes.len(), 3);
        assert_eq!(pairing(4, 2, &mut rng).len(), 2);
    }

    #[test]
    fn one_step_separates_clusters() {
        let mut rng = seeded(86);
        let mut c = Critic::new(2, 1, CriticConfig { lr: 1e-3, ..Default::default() }, &mut rng).unwrap();
        let b = batch(64, 64, &mut rng);
        critic_step(&mut c, &b, &mut rng).unwrap();
        let mean = |ts: &[Triple]| {
            ts.iter().map(|t| pseudo_reward(&c, &t.state, &t.action, &t.next_state).unwrap()).sum::<f64>() / ts.len() as f64
        };
        assert!(mean(&b.real) > mean(&b.fake));
    }

    #[test]
    fn pseudo_reward_is_forward() {
        let mut rng = seeded(87);
        let c = Critic::new(2, 1, CriticConfig::default(), &mut rng).unwrap();
        let zero = plain(Mlp::zeros(&[5, 4, 1], Activation::Relu).unwrap());
        let (s, a, n) = ([0.3, 0.1], [0.2], [0.5, -0.7]);
        assert_eq!(pseudo_reward(&zero, &s, &a, &n).unwrap(), 0.0);
        let x = c.encode(&s, &a, &n);
        assert_eq!(pseudo_reward(&c, &s, &a, &n).unwrap(), c.net().forward(&x).unwrap()[0]);
    }

    #[test]
    fn small_step_decreases_penalized_loss() {
        let mut rng = seeded(88);
        let cfg = CriticConfig { hidden: vec![6], spectral_norm: false, ..Default::default() };
        let c = Critic::new(2, 1, cfg.clone(), &mut rng).unwrap();
        let b = batch(5, 5, &mut rng);
        // Same seed, same interpolates as the step itself.
        let loss = |c: &Critic| {
            let mut r = seeded(9);
            hinge_critic_loss(c, &b, cfg.delta).unwrap() + cfg.gp_weight * gradient_penalty(c, &b, &mut r).unwrap()
        };
        let mut stepped = c.clone();
        let before = loss(&c);
        critic_step(&mut stepped, &b, &mut seeded(9)).unwrap();
        assert!(loss(&stepped) < before);
    }

    #[test]
    fn spectral_norm_bounds_layers() {
        let mut rng = seeded(89);
        let mut c = Critic::new(2, 1, CriticConfig { lr: 1e-2, ..Default::default() }, &mut rng).unwrap();
        let b = batch(32, 32, &mut rng);
        for _ in 0..50 {
            critic_step(&mut c, &b, &mut rng).unwrap();
        }
        c.net.refresh_spectral(50);
        for l in 0..c.net().n_layers() {
            let w = c.net().effective_weight(l);
            let (rows, cols) = (c.net().sizes()[l + 1], c.net().sizes()[l]);
            let s = nalgebra::DMatrix::from_row_slice(rows, cols, &w).singular_values().max();
            assert!(s <= 1.0 + 1e-3, "layer {l}: {s}");
        }
    }
}

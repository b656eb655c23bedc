//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mi_core::config::RunConfig;
use mi_core::critic::{hinge_critic_loss, truncated_objective, Critic, CriticBatch, CriticConfig, Triple};
use mi_core::envs::{make_random_mdp, TabularPolicy};
use mi_core::harness::{self, monte_carlo_occupancy, perturb_transition};
use mi_core::nn::{Activation, Mlp};
use mi_core::oracle::{
    exact_occupancy, flow_residual, sampling_decomposition_report, short_horizon_bound, tv_distance, verify_consistency,
    verify_error_bound, verify_short_horizon_bound, ConsistencyOptions,
};
use mi_core::orchestrator::CurvePoint;
use mi_core::rng::{seeded, Rng};
use mi_core::transition::{clipped_surrogate, Normalizer};
use nalgebra::DMatrix;
use rand::Rng as _;

fn report(id: usize, name: &str, pass: bool, detail: String) {
    println!("criterion {id} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_occupancy_oracle() {
    let start = Instant::now();
    let mut rng = seeded(1001);
    let (mut worst_residual, mut worst_tv) = (0.0f64, 0.0f64);
    for k in 0..20 {
        let ns = 2 + k % 7;
        let mdp = make_random_mdp(ns, 1 + k % 3, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(ns, mdp.n_actions(), &mut rng);
        let rho = exact_occupancy(&mdp, &pi, mdp.gamma()).unwrap();
        worst_residual = worst_residual.max(flow_residual(&mdp, &pi, mdp.gamma(), &rho));
        let mc = monte_carlo_occupancy(&mdp, &pi, 100_000, &mut rng).unwrap();
        worst_tv = worst_tv.max(tv_distance(&rho, &mc));
    }
    let elapsed = start.elapsed();
    let pass = worst_residual < 1e-10 && worst_tv < 0.02 && elapsed < Duration::from_secs(120);
    report(1, "occupancy", pass, format!("max residual {worst_residual:.2e}, max TV {worst_tv:.4}, {elapsed:.1?}"));
    assert!(pass);
}

#[test]
fn criterion_2_error_bound() {
    let start = Instant::now();
    let mut rng = seeded(1002);
    let mut held = 0;
    let mut min_slack = f64::INFINITY;
    for k in 0..100 {
        let ns = 2 + k % 6;
        let mdp = make_random_mdp(ns, 2, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(ns, 2, &mut rng);
        let eps = [0.01, 0.1, 0.5, 1.0][k % 4];
        let t_prime = perturb_transition(&mdp, eps, &mut rng);
        let r = verify_error_bound(&mdp, &t_prime, &pi).unwrap();
        min_slack = min_slack.min(r.slack);
        held += usize::from(r.slack >= -1e-9);
    }
    let elapsed = start.elapsed();
    let pass = held == 100 && elapsed < Duration::from_secs(300);
    report(2, "error bound", pass, format!("{held}/100 hold, min slack {min_slack:.3e}, {elapsed:.1?}"));
    assert!(pass);
}

#[test]
fn criterion_3_short_horizon() {
    let start = Instant::now();
    let mut rng = seeded(1003);
    let gammas = [0.5, 0.8, 0.9, 0.95, 0.99];
    let fractions = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut held = 0;
    for k in 0..100 {
        let gamma = gammas[k % 5];
        let beta = gamma * fractions[(k / 5) % 5];
        let ns = 2 + k % 7;
        let mdp = make_random_mdp(ns, 2, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(ns, 2, &mut rng);
        let r = verify_short_horizon_bound(&mdp, &pi, gamma, beta).unwrap();
        held += usize::from(r.lhs <= short_horizon_bound(gamma, beta) + 1e-9);
    }
    let anchor = short_horizon_bound(0.99, 0.9);
    let elapsed = start.elapsed();
    let pass = held == 100 && (anchor - 0.1).abs() < 1e-12 && elapsed < Duration::from_secs(120);
    report(3, "short horizon", pass, format!("{held}/100 hold, bound(0.99, 0.9) = {anchor}, {elapsed:.1?}"));
    assert!(pass);
}

#[test]
fn criterion_4_consistency() {
    let start = Instant::now();
    let mut rng = seeded(1004);
    let mut held = 0;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mdp = make_random_mdp(4, 2, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let r = verify_consistency(&mdp, &pi, 0.05, &ConsistencyOptions::default()).unwrap();
        worst = worst.max(r.lhs);
        held += usize::from(r.holds);
    }
    let elapsed = start.elapsed();
    let pass = held >= 18 && elapsed < Duration::from_secs(600);
    report(4, "consistency", pass, format!("{held}/20 below 0.05, worst row-TV {worst:.4}, {elapsed:.1?}"));
    assert!(pass);
}

fn random_triple(rng: &mut Rng) -> Triple {
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    Triple { state: v(3), action: v(1), next_state: v(3) }
}

#[test]
fn criterion_5_truncated_hinge_identity() {
    let mut rng = seeded(1005);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let delta = rng.random_range(0.1..3.0);
        let cfg = CriticConfig { delta, hidden: vec![8, 8], spectral_norm: k % 2 == 0, ..Default::default() };
        let net = Mlp::new(&[7, 8, 8, 1], Activation::Relu, &mut rng).unwrap();
        let critic = Critic::from_net(net, Normalizer::new(3), cfg, &mut rng).unwrap();
        let (nr, nf) = (rng.random_range(1..20), rng.random_range(1..20));
        let batch = CriticBatch {
            real: (0..nr).map(|_| random_triple(&mut rng)).collect(),
            fake: (0..nf).map(|_| random_triple(&mut rng)).collect(),
            real_source: vec![0; nr],
            fake_source: vec![0; nf],
        };
        let sum = truncated_objective(&critic, &batch, delta).unwrap() + hinge_critic_loss(&critic, &batch, delta).unwrap();
        worst = worst.max((sum - 2.0 * delta).abs());
    }
    let pass = worst <= 1e-12;
    report(5, "truncated + hinge = 2 delta", pass, format!("max deviation {worst:.2e} over 1000 critics"));
    assert!(pass);
}

/// Largest relative error between backward and central differences of
/// `c · f(x)` with respect to the parameters.
fn gradient_error(net: &mut Mlp, x: &[f64], cot: &[f64]) -> f64 {
    let cache = net.forward_cached(x).unwrap();
    let mut gb = net.grad_buffer();
    net.backward_into(&cache, cot, &mut gb);
    let analytic = net.finish(gb);
    let base = net.params().to_vec();
    let objective = |n: &Mlp| n.forward(x).unwrap().iter().zip(cot).map(|(y, c)| y * c).sum::<f64>();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        net.set_params(&p).unwrap();
        let up = objective(net);
        p[i] -= 2.0 * h;
        net.set_params(&p).unwrap();
        let down = objective(net);
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    net.set_params(&base).unwrap();
    worst
}

fn top_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
    DMatrix::from_row_slice(rows, cols, w).singular_values().max()
}

#[test]
fn criterion_6_numerics() {
    let mut rng = seeded(1006);
    let mut worst_grad = 0.0f64;
    for k in 0..100 {
        let depth = 1 + k % 3;
        let mut sizes = vec![rng.random_range(1..6)];
        sizes.extend((0..depth).map(|_| rng.random_range(2..9)));
        sizes.push(rng.random_range(1..4));
        let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let mut net = Mlp::new(&sizes, act, &mut rng).unwrap();
        // Nonzero biases keep ReLU pre-activations off the kink.
        let p: Vec<f64> = (0..net.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        net.set_params(&p).unwrap();
        if k % 4 < 2 {
            net.enable_spectral_norm_all(20, &mut rng);
        }
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cot: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst_grad = worst_grad.max(gradient_error(&mut net, &x, &cot));
    }

    let mut worst_sn = 0.0f64;
    for _ in 0..20 {
        let mut net = Mlp::new(&[6, 32, 32, 1], Activation::Relu, &mut rng).unwrap();
        net.enable_spectral_norm_all(20, &mut rng);
        net.refresh_spectral(500);
        let sizes = net.sizes().to_vec();
        for l in 0..net.n_layers() {
            let s = top_singular_value(&net.effective_weight(l), sizes[l + 1], sizes[l]);
            worst_sn = worst_sn.max((s - 1.0).abs());
        }
    }

    let clip_a = clipped_surrogate(1.3, 1.0, 0.2);
    let clip_b = clipped_surrogate(0.5, -1.0, 0.2);
    let pass = worst_grad < 1e-4 && worst_sn < 1e-3 && clip_a == 1.2 && clip_b == -0.8;
    report(
        6,
        "numerics",
        pass,
        format!("max grad rel err {worst_grad:.2e}, max |sigma-1| {worst_sn:.2e}, clip cases {clip_a} / {clip_b}"),
    );
    assert!(pass);
}

const PENDULUM: &str = r#"
mode = "MODE"
seeds = [0, 1, 2, 3, 4]
profile = "pendulum"

[env]
name = "pendulum"

[mi]
iterations = 10
real_steps_per_iter = 2000
n_transition = 10
policy_rollouts = 64

[mi.critic]
spectral_norm = false
lr = 1e-3
"#;

fn curve_of(dir: &Path) -> Vec<CurvePoint> {
    harness::curve_from_csv(&fs::read_to_string(dir.join("curve.csv")).unwrap()).unwrap()
}

#[test]
fn criterion_7_pendulum_sample_efficiency() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for mode in ["mi", "supervised-baseline"] {
        let cfg = RunConfig::parse(&PENDULUM.replace("MODE", mode)).unwrap();
        let dir = tmp.path().join(mode);
        let summary = harness::run_in(&cfg, &dir).unwrap();
        assert!(summary.failures.is_empty(), "{:?}", summary.failures);
        runs.push((cfg.seeds.clone(), dir));
    }
    let elapsed = start.elapsed();
    let (seeds, mi_dir) = &runs[0];
    let base_dir = &runs[1].1;
    let mi: Vec<Vec<CurvePoint>> = seeds.iter().map(|s| curve_of(&mi_dir.join(format!("seed_{s}")))).collect();
    let base: Vec<Vec<CurvePoint>> = seeds.iter().map(|s| curve_of(&base_dir.join(format!("seed_{s}")))).collect();

    let reached = mi
        .iter()
        .filter(|c| c.iter().any(|p| p.real_steps <= 20_000 && p.eval_return_mean >= -500.0))
        .count();
    let mut budgets_ok = true;
    let mut per_budget = Vec::new();
    for (i, p) in mi[0].iter().enumerate().filter(|(_, p)| p.real_steps >= 10_000) {
        let wins = mi.iter().zip(&base).filter(|(m, b)| m[i].eval_return_mean >= b[i].eval_return_mean).count();
        budgets_ok &= wins >= 3;
        per_budget.push(format!("{}:{wins}/5", p.real_steps));
    }
    for (s, (m, b)) in seeds.iter().zip(mi.iter().zip(&base)) {
        let fmt = |c: &[CurvePoint]| c.iter().map(|p| format!("{:.0}", p.eval_return_mean)).collect::<Vec<_>>().join(" ");
        println!("seed {s} mi:       {}", fmt(m));
        println!("seed {s} baseline: {}", fmt(b));
    }
    let pass = reached >= 3 && budgets_ok && elapsed < Duration::from_secs(3600);
    report(
        7,
        "pendulum",
        pass,
        format!("{reached}/5 seeds reach -500; MI >= baseline per budget {}; {elapsed:.0?}", per_budget.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_8_sampling_decomposition() {
    let mut rng = seeded(1008);
    let mut rows_ok = 0;
    let mut rows = 0;
    let mut decreasing = 0;
    for _ in 0..20 {
        let mdp = make_random_mdp(4, 2, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let model = mdp.with_transition(perturb_transition(&mdp, 0.2, &mut rng)).unwrap();
        let report = sampling_decomposition_report(&mdp, &pi, &model, mdp.gamma(), 0.5, &[100, 10_000], &mut rng).unwrap();
        rows += report.len();
        rows_ok += report.iter().filter(|r| r.triangle_holds).count();
        decreasing += usize::from(report[1].sampling_term < report[0].sampling_term);
    }
    let pass = rows_ok == rows && decreasing >= 18;
    report(8, "sampling decomposition", pass, format!("triangle {rows_ok}/{rows}, sampling term decreases in {decreasing}/20"));
    assert!(pass);
}

const SMALL: &str = r#"
mode = "MODE"
seeds = [3, 4]

[env]
name = "pendulum"

[mi]
iterations = 2
real_steps_per_iter = 300
n_blocks = 2
n_transition = 3
n_policy = 2
policy_rollouts = 16
generator_rollouts = 4
eval_episodes = 2
"#;

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut compared = 0;
    for mode in ["mi", "supervised-baseline"] {
        let cfg = RunConfig::parse(&SMALL.replace("MODE", mode)).unwrap();
        let a = tmp.path().join(format!("{mode}_a"));
        let b = tmp.path().join(format!("{mode}_b"));
        harness::run_in(&cfg, &a).unwrap();
        harness::run_in(&cfg, &b).unwrap();
        let mut files = vec!["curves.csv".to_string()];
        for s in &cfg.seeds {
            files.push(format!("seed_{s}/metrics.jsonl"));
            files.push(format!("seed_{s}/curve.csv"));
        }
        for f in files {
            compared += 1;
            identical += usize::from(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap());
        }
    }
    let pass = identical == compared;
    report(9, "determinism", pass, format!("{identical}/{compared} files byte-identical"));
    assert!(pass);
}


//! Run directories, per-seed execution, curve aggregation, replay and the
//! tabular certification suite.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml              resolved configuration snapshot
//! seed_<k>/metrics.jsonl   one JSON object per epoch
//! seed_<k>/curve.csv       real_steps, eval_return_mean, eval_return_std
//! seed_<k>/checkpoints/    iter_<i>.mick blobs
//! seed_<k>/dump.mick       learner state when a run aborts
//! curves.csv               mean and std across seeds
//! report.jsonl             verify mode: one certification report per line
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::Serialize;

use crate::config::{load_config, RunConfig, RunMode, VerifyConfig};
use crate::envs::{make_random_mdp, TabularMDP, TabularPolicy};
use crate::error::{Error, Result};
use crate::nn::Blob;
use crate::oracle::{
    exact_occupancy, flow_residual, sampling_decomposition_report, tv_distance, verify_consistency,
    verify_error_bound, verify_short_horizon_bound, BoundReport, ConsistencyOptions, DiscreteDistribution,
};
use crate::orchestrator::{train, CurvePoint, MetricRecord, RunSink, TrainMode};
use crate::rng::{seeded, Rng};

/// Streams metrics and checkpoints into a seed directory.
pub struct DirSink {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl DirSink {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self { dir: dir.to_path_buf(), metrics })
    }
}

impl RunSink for DirSink {
    fn metric(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::format(e.to_string()))?;
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }

    fn checkpoint(&mut self, iteration: usize, blob: &Blob) -> Result<()> {
        self.metrics.flush()?;
        blob.save(&self.dir.join("checkpoints").join(format!("iter_{iteration:04}.mick")))
    }

    fn dump(&mut self, blob: &Blob, reason: &str) -> Result<()> {
        self.metrics.flush()?;
        fs::write(self.dir.join("dump.txt"), format!("{reason}\n"))?;
        blob.save(&self.dir.join("dump.mick"))
    }
}

impl Drop for DirSink {
    fn drop(&mut self) {
        let _ = self.metrics.flush();
    }
}

pub const CURVE_HEADER: &str = "real_steps,eval_return_mean,eval_return_std";

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.real_steps, p.eval_return_mean, p.eval_return_std));
    }
    out
}

pub fn curve_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::format("curve CSV has an unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            let bad = || Error::format(format!("bad curve row `{l}`"));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(CurvePoint {
                real_steps: cols[0].parse().map_err(|_| bad())?,
                eval_return_mean: cols[1].parse().map_err(|_| bad())?,
                eval_return_std: cols[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean and population std across seeds of each seed's mean evaluation
/// return, at every step count any seed reached.
pub fn aggregate_curves(curves: &[Vec<CurvePoint>]) -> Vec<CurvePoint> {
    let mut steps: Vec<u64> = curves.iter().flatten().map(|p| p.real_steps).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|s| {
            let vals: Vec<f64> =
                curves.iter().filter_map(|c| c.iter().find(|p| p.real_steps == s)).map(|p| p.eval_return_mean).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            CurvePoint { real_steps: s, eval_return_mean: mean, eval_return_std: std }
        })
        .collect()
}

fn seed_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(k) = name.strip_prefix("seed_").and_then(|k| k.parse().ok()) {
            if path.is_dir() {
                dirs.push((k, path));
            }
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(|d| d.1).collect())
}

/// Aggregated curve from the per-seed CSVs of a finished run.
pub fn curves_from_run_dir(run_dir: &Path) -> Result<Vec<CurvePoint>> {
    let mut curves = Vec::new();
    for dir in seed_dirs(run_dir)? {
        let path = dir.join("curve.csv");
        if path.exists() {
            curves.push(curve_from_csv(&fs::read_to_string(path)?)?);
        }
    }
    if curves.is_empty() {
        return Err(Error::input(format!("no seed curves under {}", run_dir.display())));
    }
    Ok(aggregate_curves(&curves))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub curve: Vec<CurvePoint>,
    /// Seeds whose sub-run aborted, with the reason.
    pub failures: Vec<(u64, String)>,
    pub verify: Option<VerifySummary>,
}

impl RunSummary {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.verify.as_ref().is_none_or(VerifySummary::all_hold)
    }
}

/// Runs the config in its own run directory.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_in(config, &config.run_dir())
}

/// Runs the config with `run_dir` as the run directory.
pub fn run_in(config: &RunConfig, run_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.toml"), config.to_toml()?)?;
    let mode = match config.mode {
        RunMode::Mi => TrainMode::Mi,
        RunMode::SupervisedBaseline => TrainMode::SupervisedBaseline,
        RunMode::Verify => {
            let summary = verify_suite(&config.verify, config.seeds[0])?;
            let mut out = BufWriter::new(File::create(run_dir.join("report.jsonl"))?);
            for r in &summary.reports {
                writeln!(out, "{}", serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?)?;
            }
            out.flush()?;
            fs::write(run_dir.join("summary.txt"), summary.table())?;
            return Ok(RunSummary { run_dir: run_dir.to_path_buf(), curve: Vec::new(), failures: Vec::new(), verify: Some(summary) });
        }
    };
    let env = config.env.build()?;
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        let dir = run_dir.join(format!("seed_{seed}"));
        let mut sink = DirSink::create(&dir)?;
        match train(env.as_ref(), &config.mi, mode, seed, &mut sink) {
            Ok(outcome) => {
                fs::write(dir.join("curve.csv"), curve_to_csv(&outcome.curve))?;
                curves.push(outcome.curve);
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let curve = aggregate_curves(&curves);
    fs::write(run_dir.join("curves.csv"), curve_to_csv(&curve))?;
    Ok(RunSummary { run_dir: run_dir.to_path_buf(), curve, failures, verify: None })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub replay_dir: PathBuf,
    pub compared: usize,
    /// Files whose bytes differ between the original and the replay.
    pub mismatches: Vec<PathBuf>,
}

/// Re-executes a run from its config snapshot into `<run_dir>/replay` and
/// compares metrics and curves byte for byte.
pub fn replay(run_dir: &Path) -> Result<ReplayReport> {
    let config = load_config(&run_dir.join("config.toml"))?;
    let replay_dir = run_dir.join("replay");
    if replay_dir.exists() {
        fs::remove_dir_all(&replay_dir)?;
    }
    run_in(&config, &replay_dir)?;
    let mut files: Vec<PathBuf> = vec![PathBuf::from("curves.csv"), PathBuf::from("report.jsonl")];
    for dir in seed_dirs(run_dir)? {
        let name = PathBuf::from(dir.file_name().unwrap_or_default());
        files.push(name.join("metrics.jsonl"));
        files.push(name.join("curve.csv"));
    }
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for f in files {
        let (a, b) = (run_dir.join(&f), replay_dir.join(&f));
        if !a.exists() && !b.exists() {
            continue;
        }
        compared += 1;
        if fs::read(&a).ok() != fs::read(&b).ok() {
            mismatches.push(f);
        }
    }
    Ok(ReplayReport { replay_dir, compared, mismatches })
}

/// Outcome of the certification suite.
#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub reports: Vec<BoundReport>,
}

impl VerifySummary {
    pub fn all_hold(&self) -> bool {
        self.reports.iter().all(|r| r.holds)
    }

    /// `(bound, held, total)` per bound name, in first-seen order.
    pub fn counts(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for r in &self.reports {
            match out.iter_mut().find(|c| c.0 == r.bound) {
                Some(c) => {
                    c.1 += usize::from(r.holds);
                    c.2 += 1;
                }
                None => out.push((r.bound.clone(), usize::from(r.holds), 1)),
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>6} {:>9}\n", "bound", "held", "total", "violated");
        for (name, held, total) in self.counts() {
            s.push_str(&format!("{:<24} {:>6} {:>6} {:>9}\n", name, held, total, total - held));
        }
        s
    }
}

/// Histogram of `n` exact occupancy samples: roll out a geometric number of
/// steps and keep the last `(s, a)` pair.
pub fn monte_carlo_occupancy(mdp: &TabularMDP, policy: &TabularPolicy, n: usize, rng: &mut Rng) -> Result<DiscreteDistribution> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut counts = vec![0.0; ns * na];
    for _ in 0..n {
        let mut s = mdp.sample_initial(rng);
        loop {
            let a = policy.sample(s, rng);
            if rng.random::<f64>() >= mdp.gamma() {
                counts[s * na + a] += 1.0;
                break;
            }
            s = mdp.sample_next(s, a, rng);
        }
    }
    DiscreteDistribution::over_pairs(ns, na, counts.into_iter().map(|c| c / n as f64).collect())
}

/// Mixes every row of `t` with a random distribution: `(1−ε) T + ε D`.
pub fn perturb_transition(mdp: &TabularMDP, eps: f64, rng: &mut Rng) -> Vec<f64> {
    let ns = mdp.n_states();
    let noise = make_random_mdp(ns, mdp.n_actions(), rng, 0.0).expect("valid sizes");
    mdp.transition().iter().zip(noise.transition()).map(|(t, d)| (1.0 - eps) * t + eps * d).collect()
}

fn flag(bound: &str, instance: String, ok: bool, lhs: f64, rhs: f64) -> BoundReport {
    let mut r = BoundReport::new(bound, instance, lhs, rhs);
    r.holds = ok;
    r.slack = rhs - lhs;
    r
}

/// The tabular certification suite behind `mi verify`.
pub fn verify_suite(cfg: &VerifyConfig, seed: u64) -> Result<VerifySummary> {
    let mut rng = seeded(seed);
    let mut reports = Vec::new();

    for k in 0..cfg.occupancy_instances {
        let ns = 2 + k % 7;
        let mdp = make_random_mdp(ns, 2, &mut rng, 0.0)?;
        let pi = TabularPolicy::random(ns, 2, &mut rng);
        let rho = exact_occupancy(&mdp, &pi, mdp.gamma())?;
        let residual = flow_residual(&mdp, &pi, mdp.gamma(), &rho);
        reports.push(flag("flow-residual", format!("instance {k} S={ns}"), residual < 1e-10, residual, 1e-10));
        let mc = monte_carlo_occupancy(&mdp, &pi, cfg.occupancy_rollouts, &mut rng)?;
        let tv = tv_distance(&rho, &mc);
        reports.push(flag("occupancy-monte-carlo", format!("instance {k} S={ns}"), tv < 0.02, tv, 0.02));
    }

    for k in 0..cfg.error_bound_instances {
        let mdp = make_random_mdp(5, 2, &mut rng, 0.0)?;
        let pi = TabularPolicy::random(5, 2, &mut rng);
        let eps = [0.01, 0.1, 0.5, 1.0][k % 4];
        let t_prime = perturb_transition(&mdp, eps, &mut rng);
        reports.push(verify_error_bound(&mdp, &t_prime, &pi)?);
    }

    let gammas = [0.5, 0.8, 0.9, 0.95, 0.99];
    let fractions = [0.0, 0.25, 0.5, 0.75, 0.99];
    for k in 0..cfg.short_horizon_instances {
        let gamma = gammas[k % gammas.len()];
        let beta = gamma * fractions[(k / gammas.len()) % fractions.len()];
        let ns = 2 + k % 5;
        let mdp = make_random_mdp(ns, 2, &mut rng, 0.0)?;
        let pi = TabularPolicy::random(ns, 2, &mut rng);
        reports.push(verify_short_horizon_bound(&mdp, &pi, gamma, beta)?);
    }

    for _ in 0..cfg.consistency_instances {
        let mdp = make_random_mdp(4, 2, &mut rng, 0.0)?;
        let pi = TabularPolicy::random(4, 2, &mut rng);
        reports.push(verify_consistency(&mdp, &pi, cfg.consistency_tol, &ConsistencyOptions::default())?);
    }

    let mut decreasing = 0;
    for k in 0..cfg.decomposition_seeds {
        let mdp = make_random_mdp(4, 2, &mut rng, 0.0)?;
        let pi = TabularPolicy::random(4, 2, &mut rng);
        let model = mdp.with_transition(perturb_transition(&mdp, 0.2, &mut rng))?;
        let rows = sampling_decomposition_report(&mdp, &pi, &model, mdp.gamma(), 0.5, &[100, 10_000], &mut rng)?;
        for r in &rows {
            let rhs = r.model_term + r.sampling_term + r.horizon_term;
            reports.push(flag("decomposition-triangle", format!("seed {k} N={}", r.n), r.triangle_holds, r.total, rhs));
        }
        decreasing += usize::from(rows[1].sampling_term < rows[0].sampling_term);
    }
    if cfg.decomposition_seeds > 0 {
        let rate = decreasing as f64 / cfg.decomposition_seeds as f64;
        reports.push(flag("sampling-term-trend", format!("{} seeds", cfg.decomposition_seeds), rate >= 0.9, 0.9, rate));
    }
    Ok(VerifySummary { reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_occupancy;

    #[test]
    fn curve_csv_round_trip() {
        let c = vec![
            CurvePoint { real_steps: 200, eval_return_mean: -1234.5, eval_return_std: 10.25 },
            CurvePoint { real_steps: 400, eval_return_mean: -0.1, eval_return_std: 0.0 },
        ];
        let text = curve_to_csv(&c);
        assert!(text.starts_with("real_steps,eval_return_mean,eval_return_std\n"));
        assert_eq!(curve_from_csv(&text).unwrap(), c);
        assert!(curve_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn aggregation_uses_population_std() {
        let p = |s, m| CurvePoint { real_steps: s, eval_return_mean: m, eval_return_std: 0.0 };
        let agg = aggregate_curves(&[vec![p(100, 1.0), p(200, 2.0)], vec![p(100, 3.0)]]);
        assert_eq!(agg, vec![CurvePoint { real_steps: 100, eval_return_mean: 2.0, eval_return_std: 1.0 }, p(200, 2.0)]);
    }

    #[test]
    fn monte_carlo_matches_exact() {
        let mut rng = seeded(3);
        let mdp = make_random_mdp(3, 2, &mut rng, 0.0).unwrap();
        let pi = TabularPolicy::random(3, 2, &mut rng);
        let exact = exact_occupancy(&mdp, &pi, mdp.gamma()).unwrap();
        let mc = monte_carlo_occupancy(&mdp, &pi, 50_000, &mut rng).unwrap();
        assert!(tv_distance(&exact, &mc) < 0.02);
    }

    #[test]
    fn perturbation_keeps_rows_stochastic() {
        let mut rng = seeded(4);
        let mdp = make_random_mdp(4, 3, &mut rng, 0.0).unwrap();
        let t = perturb_transition(&mdp, 0.3, &mut rng);
        for row in t.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(perturb_transition(&mdp, 0.0, &mut rng), mdp.transition());
    }

    #[test]
    fn small_suite_holds() {
        let cfg = VerifyConfig {
            occupancy_instances: 2,
            occupancy_rollouts: 20_000,
            error_bound_instances: 4,
            short_horizon_instances: 5,
            consistency_instances: 0,
            consistency_tol: 0.05,
            decomposition_seeds: 0,
        };
        let s = verify_suite(&cfg, 1).unwrap();
        assert_eq!(s.reports.len(), 4 + 4 + 5);
        let table = s.table();
        assert!(table.contains("error-bound"));
        let rows = s.counts();
        assert!(rows.iter().filter(|r| r.0 != "occupancy-monte-carlo").all(|r| r.1 == r.2), "{table}");
    }
}

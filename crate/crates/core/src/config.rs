//! Run configuration in TOML with strict key checking.
//!
//! A config names an environment, a seed list and a mode. The `[mi]` table
//! is layered on top of an optional named profile, so the resolved snapshot
//! always spells out every setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::orchestrator::MIConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Mi,
    SupervisedBaseline,
    Verify,
}

/// Sizes of the tabular certification suite run by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub occupancy_instances: usize,
    pub occupancy_rollouts: usize,
    pub error_bound_instances: usize,
    pub short_horizon_instances: usize,
    pub consistency_instances: usize,
    pub consistency_tol: f64,
    pub decomposition_seeds: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            occupancy_instances: 20,
            occupancy_rollouts: 100_000,
            error_bound_instances: 100,
            short_horizon_instances: 100,
            consistency_instances: 20,
            consistency_tol: 0.05,
            decomposition_seeds: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    #[serde(default = "default_name")]
    pub name: String,
    /// Run directory; when absent the run goes to `$MI_OUTPUT_ROOT/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Hyper-parameter profile applied beneath `[mi]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    pub env: EnvConfig,
    #[serde(default)]
    pub mi: MIConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_name() -> String {
    "run".to_string()
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_error)?;
        let profile = match table.get("profile") {
            Some(toml::Value::String(p)) => Some(p.clone()),
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => None,
        };
        let base = match &profile {
            Some(p) => MIConfig::profile(p)?,
            None => MIConfig::default(),
        };
        let mut mi = toml::Value::try_from(&base).map_err(config_error)?;
        if let Some(user) = table.remove("mi") {
            if !user.is_table() {
                return Err(Error::Config("`mi` must be a table".into()));
            }
            merge(&mut mi, user);
        }
        table.insert("mi".into(), mi);
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("`seeds` contains duplicates".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("`name` must be a plain directory name".into()));
        }
        self.env.build().map_err(|e| Error::Config(format!("env: {e}")))?;
        self.mi.validate()?;
        if self.verify.consistency_tol <= 0.0 {
            return Err(Error::Config("verify.consistency_tol must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved TOML. Parsing it yields an identical config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    /// `output_dir`, else `$MI_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os("MI_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.name)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "mode = \"mi\"\nseeds = [0]\n[env]\nname = \"pendulum\"\n";

    #[test]
    fn minimal_config_fills_defaults_and_round_trips() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.mi, MIConfig::default());
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn bad_gamma_is_rejected() {
        let text = format!("{MINIMAL}gamma = 1.2\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("(0,1)") || err.contains("(0, 1)"), "{err}");
    }

    #[test]
    fn unknown_and_missing_fields_are_named() {
        let err = RunConfig::parse(&format!("{MINIMAL}[mi]\nitertions = 3\n")).unwrap_err().to_string();
        assert!(err.contains("itertions"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}colour = 1\n")).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
        let err = RunConfig::parse("mode = \"mi\"\n[env]\nname = \"pendulum\"\n").unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");
        let err = RunConfig::parse("mode = \"mi\"\nseeds = [1]\n").unwrap_err().to_string();
        assert!(err.contains("env"), "{err}");
    }

    #[test]
    fn profile_layers_under_user_values() {
        let text = "mode = \"mi\"\nseeds = [0, 1]\nprofile = \"hopper\"\n[env]\nname = \"pendulum\"\n[mi]\nn_policy = 3\n[mi.critic]\ndelta = 0.5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!((cfg.mi.n_blocks, cfg.mi.eta(), cfg.mi.n_transition, cfg.mi.model_horizon), (10, 10.0, 100, 10));
        assert_eq!(cfg.mi.entropy_coef(), 1e-3);
        assert_eq!((cfg.mi.n_policy, cfg.mi.delta()), (3, 0.5));
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn seeds_must_be_nonempty_and_distinct() {
        assert!(RunConfig::parse("mode = \"mi\"\nseeds = []\n[env]\nname = \"pendulum\"\n").is_err());
        assert!(RunConfig::parse("mode = \"mi\"\nseeds = [1, 1]\n[env]\nname = \"pendulum\"\n").is_err());
    }

    #[test]
    fn unknown_env_is_rejected() {
        assert!(RunConfig::parse("mode = \"mi\"\nseeds = [0]\n[env]\nname = \"walker\"\n").is_err());
    }
}

//! Scenario files: a versioned TOML tree with unknown keys rejected, scalar
//! overrides from `HSVM_`-prefixed environment variables and range validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::ModelParams;
use crate::dynamic::{DynamicConfig, PerturbationSpec};
use crate::error::{Error, Result};
use crate::steady::{ProfileSpec, SteadyConfig};
use crate::verify::CheckSpec;

/// Schema version understood by this build.
pub const SCHEMA_VERSION: u32 = 1;
/// Prefix of environment overrides: `HSVM_STEADY__TOL=1e-7` sets `steady.tol`.
pub const ENV_PREFIX: &str = "HSVM_";

/// Checks run by `verify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub checks: Vec<CheckSpec>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            checks: CheckSpec::defaults(),
        }
    }
}

/// One complete run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelParams,
    #[serde(default)]
    pub profile: ProfileSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub steady: SteadyConfig,
    #[serde(default)]
    pub dynamic: DynamicConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    /// Overrides every sampler seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            schema_version: SCHEMA_VERSION,
            model: ModelParams::default(),
            profile: ProfileSpec::default(),
            perturbation: PerturbationSpec::default(),
            steady: SteadyConfig::default(),
            dynamic: DynamicConfig::default(),
            verify: VerifyConfig::default(),
            seed: None,
            output_dir: default_output_dir(),
        }
    }
}

impl Scenario {
    /// Parses and validates TOML text without environment overrides.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let s: Scenario = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))?;
        s.validated()
    }

    /// Reads a scenario file and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::IoFailure(format!("{}: {e}", path.display())))?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    /// Parses TOML text and applies `HSVM_` overrides from `vars`. Keys are
    /// lowercased and `__` separates table levels; values are parsed as TOML
    /// scalars and fall back to strings.
    pub fn from_toml_with_env<I: IntoIterator<Item = (String, String)>>(
        text: &str,
        vars: I,
    ) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for (k, v) in vars {
            let Some(rest) = k.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            set_scalar(&mut value, &path, &v)
                .map_err(|e| Error::ConfigInvalid(format!("override {k}: {e}")))?;
        }
        Self::from_value(value)
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.steady.seed = seed;
        self.dynamic.seed = seed.wrapping_add(1);
        for (k, c) in self.verify.checks.iter_mut().enumerate() {
            c.seed = seed.wrapping_add(101 * (k as u64 + 1));
        }
    }

    /// Schema and range checks.
    pub fn validated(mut self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::ConfigInvalid(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let m = &self.model;
        if !(m.beta > 1.0) || !m.beta.is_finite() {
            return Err(Error::ConfigInvalid(format!(
                "model.beta = {} must be finite and > 1",
                m.beta
            )));
        }
        m.validate()?;
        for c in &self.verify.checks {
            if !(c.tolerance >= 0.0) || !c.tolerance.is_finite() {
                return Err(Error::ConfigInvalid(format!(
                    "verify check {} tolerance {} must be finite and >= 0",
                    c.kind.name(),
                    c.tolerance
                )));
            }
        }
        let d = &self.dynamic;
        if !(d.dt > 0.0 && d.dt.is_finite()) || !(d.t_end >= 0.0 && d.t_end.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "dynamic.dt = {} and dynamic.t_end = {} must be positive and finite",
                d.dt, d.t_end
            )));
        }
        let s = &self.steady;
        if !(s.tol > 0.0 && s.tol.is_finite()) || s.max_iters == 0 {
            return Err(Error::ConfigInvalid(format!(
                "steady.tol = {} must be positive and steady.max_iters = {} nonzero",
                s.tol, s.max_iters
            )));
        }
        if let Some(seed) = self.seed {
            self.reseed(seed);
        }
        Ok(self)
    }

    /// Pretty TOML of the scenario.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }
}

fn set_scalar(
    root: &mut toml::Value,
    path: &[String],
    raw: &str,
) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = root;
    for p in parents {
        let table = node.as_table_mut().ok_or(format!("{p} is not a table"))?;
        node = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or(format!("parent of {last} is not a table"))?;
    if let Some(existing) = table.get(last) {
        if existing.is_table() || existing.is_array() {
            return Err(format!("{last} is not a scalar"));
        }
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table() && !v.is_array())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    table.insert(last.clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_round_trips() {
        let s = Scenario::default();
        let text = s.to_toml().unwrap();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let s = Scenario::from_toml("schema_version = 1").unwrap();
        assert_eq!(s, Scenario::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Scenario::from_toml("schema_version = 1\nbogus = 3"),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(matches!(
            Scenario::from_toml("schema_version = 1\n[steady]\nbogus = 3"),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn low_beta_is_rejected() {
        let text =
            "schema_version = 1\n[model]\nm_plus = 1.0\nm_minus = 1.0\ng = 8.0\nbeta = 0.5\n";
        assert!(matches!(
            Scenario::from_toml(text),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        assert!(matches!(
            Scenario::from_toml("schema_version = 2"),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn env_overrides_set_nested_scalars() {
        let vars = vec![
            ("HSVM_STEADY__TOL".to_string(), "1e-7".to_string()),
            ("HSVM_DYNAMIC__T_END".to_string(), "2.5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let s = Scenario::from_toml_with_env("schema_version = 1", vars).unwrap();
        assert_eq!(s.steady.tol, 1e-7);
        assert_eq!(s.dynamic.t_end, 2.5);
    }

    #[test]
    fn env_override_of_a_table_fails() {
        let vars = vec![("HSVM_VERIFY__CHECKS".to_string(), "3".to_string())];
        assert!(
            Scenario::from_toml_with_env("schema_version = 1\n[verify]\nchecks = []", vars)
                .is_err()
        );
    }

    #[test]
    fn global_seed_reseeds_every_sampler() {
        let s = Scenario::from_toml("schema_version = 1\nseed = 99").unwrap();
        assert_eq!(s.steady.seed, 99);
        let seeds: std::collections::BTreeSet<u64> =
            s.verify.checks.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), s.verify.checks.len());
    }
}

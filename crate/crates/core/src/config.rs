//! TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::EvalConfig;
use crate::features::FeatureConfig;
use crate::models::{IntervalConfig, ModelConfig, DEFAULT_PLANNING_CAP};
use crate::syncohort::GeneratorConfig;
use crate::trialdata::FilterConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Cohort CSVs (`studies.csv`, `sites.csv`, `events.csv`).
    pub data_dir: PathBuf,
    /// Intermediate artifacts: features, panel, preprocessing, model.
    pub work_dir: PathBuf,
    /// Reports and forecasts.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            work_dir: "work".into(),
            out_dir: "out".into(),
        }
    }
}

impl PathsConfig {
    /// Relative paths are taken from `base`, normally the config file's
    /// directory.
    pub fn resolve(&self, base: &Path) -> PathsConfig {
        let r = |p: &PathBuf| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.clone()
            }
        };
        PathsConfig {
            data_dir: r(&self.data_dir),
            work_dir: r(&self.work_dir),
            out_dir: r(&self.out_dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegritySection {
    pub activation_slack_months: i32,
}

impl Default for IntegritySection {
    fn default() -> Self {
        IntegritySection {
            activation_slack_months: crate::trialdata::IntegrityConfig::default()
                .activation_slack_months,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Evaluation,
    Planning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub mode: PredictMode,
    pub cap_months: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            mode: PredictMode::Evaluation,
            cap_months: DEFAULT_PLANNING_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides every seed in the file when set.
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    pub threads: Option<usize>,
    pub paths: PathsConfig,
    pub generator: GeneratorConfig,
    pub integrity: IntegritySection,
    pub filters: FilterConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub intervals: IntervalConfig,
}

/// Dotted key of the assignment at byte `offset` of a TOML document.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let mut table = String::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        let end = start + line.len();
        let t = line.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < end {
            let key = t.split_once('=').map(|(k, _)| k.trim().to_string());
            return match (key, table.is_empty()) {
                (Some(k), true) => Some(k),
                (Some(k), false) => Some(format!("{table}.{k}")),
                (None, false) => Some(table),
                (None, true) => None,
            };
        }
        start = end;
    }
    None
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .and_then(|s| key_at(text, s.start))
                .unwrap_or_else(|| "<root>".into());
            Error::Config {
                key,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies command-line overrides and propagates the global seed.
    pub fn with_overrides(mut self, seed: Option<u64>, threads: Option<usize>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if threads.is_some() {
            self.threads = threads;
        }
        if let Some(s) = self.seed {
            self.generator.rng_seed = s;
            self.model.seed = s;
            self.eval.seed = s;
            self.intervals.seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config {
                key: "threads".into(),
                message: "must be at least 1".into(),
            });
        }
        self.generator.validate()?;
        if !(self.filters.bulk_fraction > 0.0 && self.filters.bulk_fraction <= 1.0) {
            return Err(Error::Config {
                key: "filters.bulk_fraction".into(),
                message: format!("{} is outside (0,1]", self.filters.bulk_fraction),
            });
        }
        if self.integrity.activation_slack_months < 0 {
            return Err(Error::Config {
                key: "integrity.activation_slack_months".into(),
                message: "must be >= 0".into(),
            });
        }
        self.features.validate()?;
        self.model.validate()?;
        if self.predict.cap_months == 0 {
            return Err(Error::Config {
                key: "predict.cap_months".into(),
                message: "must be positive".into(),
            });
        }
        self.eval.validate()?;
        self.intervals.validate()
    }

    pub fn integrity(&self) -> crate::trialdata::IntegrityConfig {
        crate::trialdata::IntegrityConfig {
            activation_slack_months: self.integrity.activation_slack_months,
        }
    }

    /// The effective configuration as TOML.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn range_errors_name_the_key() {
        assert_eq!(key_of("[model]\ntweedie_p = 2.5\n"), "model.tweedie_p");
        assert_eq!(key_of("[intervals]\nn_sims = 10\n"), "intervals.n_sims");
        assert_eq!(
            key_of("[generator]\nzero_inflation = 1.5\n"),
            "generator.zero_inflation"
        );
        assert_eq!(key_of("threads = 0\n"), "threads");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_located() {
        assert_eq!(key_of("[model]\ntweedie_q = 1.5\n"), "model.tweedie_q");
        assert_eq!(
            key_of("[model]\nseed = 1\ntweedie_p = \"high\"\n"),
            "model.tweedie_p"
        );
        assert_eq!(key_of("[model.gbt]\nn_rounds = -3\n"), "model.gbt.n_rounds");
        assert_eq!(key_of("nonsense = 1\n"), "nonsense");
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let c = RunConfig::parse("seed = 4\n")
            .unwrap()
            .with_overrides(Some(9), Some(2))
            .unwrap();
        assert_eq!(
            (
                c.generator.rng_seed,
                c.model.seed,
                c.eval.seed,
                c.intervals.seed
            ),
            (9, 9, 9, 9)
        );
        assert_eq!(c.threads, Some(2));
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::default();
        c.model.tweedie_p = 1.3;
        c.eval.rolling = Some(Default::default());
        let back = RunConfig::parse(&c.echo().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

//! Split protocols, multi-level error metrics, milestone errors, rolling
//! time-split evaluation, interval calibration and comparison reports.

mod metrics;
mod report;
mod split;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    calibration_report, compute_all_levels, compute_metrics, error_summary, milestone_mae,
    unit_errors, CoverageRow, MetricLevel, MetricsReport, MilestoneReport,
};
pub use report::{
    leaderboard, write_calibration_csv, write_metrics_csv, write_milestones_csv, write_rolling_csv,
};
pub use split::{make_random_split, make_rolling_time_split, Assignment, RollingSplit, SplitPlan};

use crate::calendar::Quarter;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, PreprocessConfig};
use crate::models::{train_model, ModelConfig, ModelKind};
use crate::trialdata::{Cohort, SiteMonthPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RollingConfig {
    /// First and last test quarter, as `2015Q1`.
    pub start: String,
    pub end: String,
    pub models: Vec<ModelKind>,
}

impl Default for RollingConfig {
    fn default() -> Self {
        RollingConfig {
            start: "2015Q1".into(),
            end: "2019Q4".into(),
            models: vec![ModelKind::GbtTweedie],
        }
    }
}

impl RollingConfig {
    pub fn quarters(&self) -> Result<(Quarter, Quarter)> {
        let q = |k: &str, v: &str| {
            Quarter::parse(v).ok_or_else(|| Error::Config {
                key: format!("eval.rolling.{k}"),
                message: format!("{v:?} is not a quarter like 2015Q1"),
            })
        };
        let (a, b) = (q("start", &self.start)?, q("end", &self.end)?);
        if b < a {
            return Err(Error::Config {
                key: "eval.rolling.end".into(),
                message: format!("{b} precedes start {a}"),
            });
        }
        Ok((a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub holdout_fraction: f64,
    pub k_folds: usize,
    pub seed: u64,
    pub models: Vec<ModelKind>,
    /// Also train on all discovery studies and score the holdout.
    pub score_holdout: bool,
    pub rolling: Option<RollingConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            holdout_fraction: 0.25,
            k_folds: 5,
            seed: 0,
            models: ModelKind::ALL.to_vec(),
            score_holdout: true,
            rolling: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Error::Config {
            key: format!("eval.{k}"),
            message: m.into(),
        };
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(err("holdout_fraction", "must be in [0,1)"));
        }
        if self.k_folds < 2 {
            return Err(err("k_folds", "must be at least 2"));
        }
        if self.models.is_empty() {
            return Err(err("models", "needs at least one model"));
        }
        if let Some(r) = &self.rolling {
            r.quarters()?;
            if r.models.is_empty() {
                return Err(err("rolling.models", "needs at least one model"));
            }
        }
        Ok(())
    }
}

/// Out-of-fold predictions with the training provenance of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct OofPredictions {
    pub kind: ModelKind,
    pub rows: Vec<usize>,
    pub pred: Vec<f64>,
    /// Fold whose model produced each prediction.
    pub fold: Vec<usize>,
    /// Training studies of each fold model.
    pub train_studies: Vec<BTreeSet<String>>,
}

impl OofPredictions {
    pub fn keys(&self, x: &FeatureMatrix) -> Vec<crate::features::RowKey> {
        self.rows.iter().map(|&r| x.keys()[r].clone()).collect()
    }

    /// Predictions restricted to `studies`, as (keys, predictions).
    pub fn subset(
        &self,
        x: &FeatureMatrix,
        studies: &BTreeSet<String>,
    ) -> (Vec<crate::features::RowKey>, Vec<f64>) {
        self.rows
            .iter()
            .zip(&self.pred)
            .filter(|(r, _)| studies.contains(&x.keys()[**r].study_id))
            .map(|(r, p)| (x.keys()[*r].clone(), *p))
            .unzip()
    }
}

fn rows_of(x: &FeatureMatrix, studies: &HashSet<&str>) -> Vec<usize> {
    x.rows_where(|s| studies.contains(s))
}

/// Trains on the rows of `train` studies and predicts the rows of `test`
/// studies.
pub fn fit_predict(
    kind: ModelKind,
    x: &FeatureMatrix,
    y: &[f64],
    train: &HashSet<&str>,
    test: &HashSet<&str>,
    model_cfg: &ModelConfig,
    prep_cfg: &PreprocessConfig,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if train.iter().any(|s| test.contains(s)) {
        return Err(Error::InvalidParam("train and test studies overlap".into()));
    }
    let train_rows = rows_of(x, train);
    let test_rows = rows_of(x, test);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::InvalidParam("empty train or test rows".into()));
    }
    let model = train_model(kind, x, y, &train_rows, model_cfg, prep_cfg)?;
    let pred = model.predict(&x.select_rows(&test_rows))?;
    Ok((test_rows, pred))
}

pub fn cross_validate(
    kind: ModelKind,
    x: &FeatureMatrix,
    y: &[f64],
    plan: &SplitPlan,
    model_cfg: &ModelConfig,
    prep_cfg: &PreprocessConfig,
) -> Result<OofPredictions> {
    let discovery = plan.discovery();
    let folds: Vec<Result<(Vec<usize>, Vec<f64>, BTreeSet<String>)>> = (0..plan.k_folds)
        .into_par_iter()
        .map(|k| {
            let test: HashSet<&str> = plan.fold(k).into_iter().collect();
            let train: HashSet<&str> = discovery
                .iter()
                .copied()
                .filter(|s| !test.contains(s))
                .collect();
            let (rows, pred) = fit_predict(kind, x, y, &train, &test, model_cfg, prep_cfg)?;
            Ok((rows, pred, train.into_iter().map(String::from).collect()))
        })
        .collect();
    let mut out = OofPredictions {
        kind,
        rows: Vec::new(),
        pred: Vec::new(),
        fold: Vec::new(),
        train_studies: Vec::new(),
    };
    for (k, f) in folds.into_iter().enumerate() {
        let (rows, pred, train) = f?;
        out.fold.extend(std::iter::repeat_n(k, rows.len()));
        out.rows.extend(rows);
        out.pred.extend(pred);
        out.train_studies.push(train);
    }
    // Restore matrix row order so downstream sums are order-stable.
    let mut order: Vec<usize> = (0..out.rows.len()).collect();
    order.sort_by_key(|&i| out.rows[i]);
    out.rows = order.iter().map(|&i| out.rows[i]).collect();
    out.pred = order.iter().map(|&i| out.pred[i]).collect();
    out.fold = order.iter().map(|&i| out.fold[i]).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Time,
    Random,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Time => "time",
            SplitKind::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingRow {
    pub quarter: Quarter,
    pub model: String,
    pub split: SplitKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Study-level errors on the quarter's test studies.
    pub metrics: MetricsReport,
}

/// Per-quarter study-level errors for a model retrained on everything
/// initiated before each quarter, next to the same studies' random-split
/// out-of-fold errors.
pub fn rolling_evaluation(
    kind: ModelKind,
    x: &FeatureMatrix,
    y: &[f64],
    panel: &SiteMonthPanel,
    splits: &[RollingSplit],
    oof: &OofPredictions,
    model_cfg: &ModelConfig,
    prep_cfg: &PreprocessConfig,
) -> Result<Vec<RollingRow>> {
    let n_random_train = oof
        .train_studies
        .iter()
        .map(BTreeSet::len)
        .max()
        .unwrap_or(0);
    let per_quarter: Vec<Result<[RollingRow; 2]>> = splits
        .par_iter()
        .map(|s| {
            let train: HashSet<&str> = s.train.iter().map(String::as_str).collect();
            let test: HashSet<&str> = s.test.iter().map(String::as_str).collect();
            let (rows, pred) = fit_predict(kind, x, y, &train, &test, model_cfg, prep_cfg)?;
            let keys: Vec<_> = rows.iter().map(|&r| x.keys()[r].clone()).collect();
            let time = compute_metrics(kind.tag(), &keys, &pred, panel, MetricLevel::Study)?;
            let (rkeys, rpred) = oof.subset(x, &s.test);
            let random = compute_metrics(kind.tag(), &rkeys, &rpred, panel, MetricLevel::Study)?;
            let row = |split, n_train, metrics| RollingRow {
                quarter: s.quarter,
                model: kind.tag().to_string(),
                split,
                n_train,
                n_test: s.test.len(),
                metrics,
            };
            Ok([
                row(SplitKind::Time, s.train.len(), time),
                row(SplitKind::Random, n_random_train, random),
            ])
        })
        .collect();
    let mut out = Vec::new();
    for q in per_quarter {
        out.extend(q?);
    }
    Ok(out)
}

/// Test-count weighted mean of the per-quarter MAE for one split kind,
/// which equals the MAE pooled over all tested studies.
pub fn pooled_mae(rows: &[RollingRow], split: SplitKind) -> f64 {
    let (s, n) = rows
        .iter()
        .filter(|r| r.split == split)
        .fold((0.0, 0usize), |(s, n), r| {
            (s + r.metrics.mae * r.metrics.n as f64, n + r.metrics.n)
        });
    s / n as f64
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationOutput {
    pub cv_metrics: Vec<MetricsReport>,
    pub cv_milestones: Vec<MilestoneReport>,
    pub holdout_metrics: Vec<MetricsReport>,
    pub holdout_milestones: Vec<MilestoneReport>,
    pub rolling: Vec<RollingRow>,
    pub leaderboard: String,
}

impl EvaluationOutput {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut out = |name: &str| {
            let p = dir.join(name);
            written.push(p.clone());
            p
        };
        write_metrics_csv(&out("metrics.csv"), &self.cv_metrics)?;
        write_milestones_csv(&out("milestones.csv"), &self.cv_milestones)?;
        if !self.holdout_metrics.is_empty() {
            write_metrics_csv(&out("metrics_holdout.csv"), &self.holdout_metrics)?;
            write_milestones_csv(&out("milestones_holdout.csv"), &self.holdout_milestones)?;
        }
        if !self.rolling.is_empty() {
            write_rolling_csv(&out("rolling.csv"), &self.rolling)?;
        }
        let p = out("leaderboard.md");
        std::fs::write(&p, &self.leaderboard).map_err(|e| Error::io(&p, e))?;
        Ok(written)
    }
}

/// Cross-validation on the discovery studies, optional holdout scoring and
/// optional rolling time-split evaluation, for every configured model.
pub fn run_evaluation(
    cohort: &Cohort,
    panel: &SiteMonthPanel,
    x: &FeatureMatrix,
    y: &[f64],
    cfg: &EvalConfig,
    model_cfg: &ModelConfig,
    prep_cfg: &PreprocessConfig,
) -> Result<EvaluationOutput> {
    cfg.validate()?;
    let ids: Vec<String> = cohort
        .studies()
        .iter()
        .map(|s| s.study_id.clone())
        .collect();
    let plan = make_random_split(&ids, cfg.holdout_fraction, cfg.k_folds, cfg.seed)?;
    let mut out = EvaluationOutput::default();
    for &kind in &cfg.models {
        log::info!("cross-validating {kind}");
        let oof = cross_validate(kind, x, y, &plan, model_cfg, prep_cfg)?;
        let keys = oof.keys(x);
        out.cv_metrics
            .extend(compute_all_levels(kind.tag(), &keys, &oof.pred, panel)?);
        out.cv_milestones
            .extend(milestone_mae(kind.tag(), &keys, &oof.pred, panel, cohort)?);
        let holdout = plan.holdout();
        if cfg.score_holdout && !holdout.is_empty() {
            log::info!("scoring {kind} on the holdout");
            let train: HashSet<&str> = plan.discovery().into_iter().collect();
            let test: HashSet<&str> = holdout.into_iter().collect();
            let (rows, pred) = fit_predict(kind, x, y, &train, &test, model_cfg, prep_cfg)?;
            let keys: Vec<_> = rows.iter().map(|&r| x.keys()[r].clone()).collect();
            out.holdout_metrics
                .extend(compute_all_levels(kind.tag(), &keys, &pred, panel)?);
            out.holdout_milestones
                .extend(milestone_mae(kind.tag(), &keys, &pred, panel, cohort)?);
        }
    }
    if let Some(r) = &cfg.rolling {
        let (start, end) = r.quarters()?;
        let splits = make_rolling_time_split(cohort, start, end)?;
        let all = make_random_split(&ids, 0.0, cfg.k_folds, cfg.seed)?;
        for &kind in &r.models {
            log::info!(
                "rolling evaluation of {kind} over {} quarters",
                splits.len()
            );
            let oof = cross_validate(kind, x, y, &all, model_cfg, prep_cfg)?;
            out.rolling.extend(rolling_evaluation(
                kind, x, y, panel, &splits, &oof, model_cfg, prep_cfg,
            )?);
        }
    }
    out.leaderboard = format!(
        "# Model comparison\n\n{}",
        leaderboard("Cross-validation", &out.cv_metrics, &out.cv_milestones)
    );
    if !out.holdout_metrics.is_empty() {
        out.leaderboard.push('\n');
        out.leaderboard.push_str(&leaderboard(
            "Holdout",
            &out.holdout_metrics,
            &out.holdout_milestones,
        ));
    }
    if !out.rolling.is_empty() {
        out.leaderboard.push_str("\n## Rolling time split\n\n| Model | Time-split MAE | Random-split MAE |\n|---|---:|---:|\n");
        let mut models: Vec<&str> = out.rolling.iter().map(|r| r.model.as_str()).collect();
        models.dedup();
        for m in models {
            let rows: Vec<RollingRow> = out
                .rolling
                .iter()
                .filter(|r| r.model == m)
                .cloned()
                .collect();
            out.leaderboard.push_str(&format!(
                "| {m} | {:.3} | {:.3} |\n",
                pooled_mae(&rows, SplitKind::Time),
                pooled_mae(&rows, SplitKind::Random)
            ));
        }
    }
    Ok(out)
}

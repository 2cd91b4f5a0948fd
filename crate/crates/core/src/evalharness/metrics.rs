use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::features::RowKey;
use crate::models::IntervalBands;
use crate::stats::{mean, sample_sd};
use crate::trialdata::{compute_milestones, milestone_targets, Cohort, Milestone, SiteMonthPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricLevel {
    Study,
    StudySite,
    StudySiteMonth,
}

impl MetricLevel {
    pub const ALL: [MetricLevel; 3] = [
        MetricLevel::Study,
        MetricLevel::StudySite,
        MetricLevel::StudySiteMonth,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MetricLevel::Study => "study",
            MetricLevel::StudySite => "study-site",
            MetricLevel::StudySiteMonth => "study-site-month",
        }
    }
}

impl fmt::Display for MetricLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub level: MetricLevel,
    pub mae: f64,
    pub mae_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub n: usize,
}

/// MAE, MSE and their standard errors (SD of the per-unit errors over
/// the square root of the unit count).
pub fn error_summary(errors: &[f64]) -> (f64, f64, f64, f64) {
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let rn = (errors.len() as f64).sqrt();
    (
        mean(&abs),
        sample_sd(&abs) / rn,
        mean(&sq),
        sample_sd(&sq) / rn,
    )
}

pub(crate) fn actual_counts(panel: &SiteMonthPanel) -> HashMap<(&str, &str, u32), f64> {
    panel
        .rows()
        .iter()
        .map(|r| {
            (
                (r.study_id.as_str(), r.facility_id.as_str(), r.month_index),
                r.enrolled_count as f64,
            )
        })
        .collect()
}

/// Prediction minus actual for every unit of `level`, ordered by unit key.
pub fn unit_errors(
    keys: &[RowKey],
    pred: &[f64],
    panel: &SiteMonthPanel,
    level: MetricLevel,
) -> Result<Vec<f64>> {
    if keys.len() != pred.len() {
        return Err(Error::KeyMismatch(format!(
            "{} keys for {} predictions",
            keys.len(),
            pred.len()
        )));
    }
    let actual = actual_counts(panel);
    let mut units: BTreeMap<(&str, &str, u32), (f64, f64)> = BTreeMap::new();
    for (k, p) in keys.iter().zip(pred) {
        let a = *actual
            .get(&(k.study_id.as_str(), k.facility_id.as_str(), k.month_index))
            .ok_or_else(|| {
                Error::KeyMismatch(format!(
                    "{}/{}/{} not in panel",
                    k.study_id, k.facility_id, k.month_index
                ))
            })?;
        let unit = match level {
            MetricLevel::Study => (k.study_id.as_str(), "", 0),
            MetricLevel::StudySite => (k.study_id.as_str(), k.facility_id.as_str(), 0),
            MetricLevel::StudySiteMonth => {
                (k.study_id.as_str(), k.facility_id.as_str(), k.month_index)
            }
        };
        let e = units.entry(unit).or_default();
        e.0 += p;
        e.1 += a;
    }
    Ok(units.values().map(|(p, a)| p - a).collect())
}

pub fn compute_metrics(
    model: &str,
    keys: &[RowKey],
    pred: &[f64],
    panel: &SiteMonthPanel,
    level: MetricLevel,
) -> Result<MetricsReport> {
    let errors = unit_errors(keys, pred, panel, level)?;
    if errors.is_empty() {
        return Err(Error::InvalidParam("no predictions to score".into()));
    }
    let (mae, mae_se, mse, mse_se) = error_summary(&errors);
    Ok(MetricsReport {
        model: model.to_string(),
        level,
        mae,
        mae_se,
        mse,
        mse_se,
        n: errors.len(),
    })
}

pub fn compute_all_levels(
    model: &str,
    keys: &[RowKey],
    pred: &[f64],
    panel: &SiteMonthPanel,
) -> Result<Vec<MetricsReport>> {
    MetricLevel::ALL
        .iter()
        .map(|&l| compute_metrics(model, keys, pred, panel, l))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneReport {
    pub model: String,
    pub milestone: Milestone,
    /// Mean |predicted - actual| cumulative count at the actual milestone month.
    pub mae: f64,
    pub mae_se: f64,
    pub n: usize,
    /// Studies without the milestone.
    pub skipped: usize,
    /// Mean |months| between predicted and actual milestone, over the
    /// studies whose prediction reaches it.
    pub timing_mae: f64,
    pub timing_n: usize,
}

/// Monthly predicted and actual study totals by calendar month.
fn study_months(
    keys: &[RowKey],
    pred: &[f64],
    panel: &SiteMonthPanel,
) -> Result<BTreeMap<String, BTreeMap<YearMonth, (f64, f64)>>> {
    let actual = actual_counts(panel);
    let mut out: BTreeMap<String, BTreeMap<YearMonth, (f64, f64)>> = BTreeMap::new();
    for (k, p) in keys.iter().zip(pred) {
        let span = panel.span_of(&k.study_id, &k.facility_id).ok_or_else(|| {
            Error::KeyMismatch(format!("{}/{} not in panel", k.study_id, k.facility_id))
        })?;
        let a = actual[&(k.study_id.as_str(), k.facility_id.as_str(), k.month_index)];
        let e = out
            .entry(k.study_id.clone())
            .or_default()
            .entry(span.creation.plus(k.month_index as i32))
            .or_default();
        e.0 += p;
        e.1 += a;
    }
    Ok(out)
}

pub fn milestone_mae(
    model: &str,
    keys: &[RowKey],
    pred: &[f64],
    panel: &SiteMonthPanel,
    cohort: &Cohort,
) -> Result<Vec<MilestoneReport>> {
    if keys.len() != pred.len() {
        return Err(Error::KeyMismatch(format!(
            "{} keys for {} predictions",
            keys.len(),
            pred.len()
        )));
    }
    let months = study_months(keys, pred, panel)?;
    let mut errors: [Vec<f64>; 3] = Default::default();
    let mut timing: [Vec<f64>; 3] = Default::default();
    let mut skipped = [0usize; 3];
    for (study, series) in &months {
        let dates = match compute_milestones(cohort, study) {
            Ok(d) => d,
            Err(Error::NoEvents(_)) => {
                skipped.iter_mut().for_each(|s| *s += 1);
                continue;
            }
            Err(e) => return Err(e),
        };
        let targets = milestone_targets(dates.total);
        for (i, m) in Milestone::ALL.into_iter().enumerate() {
            let at = dates.get(m);
            let (mut p, mut a) = (0.0, 0.0);
            let mut reached = None;
            for (ym, (pv, av)) in series {
                if *ym <= at {
                    p += pv;
                    a += av;
                }
            }
            let mut cum = 0.0;
            for (ym, (pv, _)) in series {
                cum += pv;
                if cum >= targets[i] as f64 {
                    reached = Some(*ym);
                    break;
                }
            }
            errors[i].push(p - a);
            if let Some(ym) = reached {
                timing[i].push(ym.months_since(at) as f64);
            }
        }
    }
    Ok(Milestone::ALL
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let (mae, mae_se, _, _) = error_summary(&errors[i]);
            let (timing_mae, _, _, _) = error_summary(&timing[i]);
            MilestoneReport {
                model: model.to_string(),
                milestone: m,
                mae,
                mae_se,
                n: errors[i].len(),
                skipped: skipped[i],
                timing_mae,
                timing_n: timing[i].len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub model: String,
    pub level: f64,
    pub coverage: f64,
    pub n: usize,
}

/// Share of studies whose actual final total lies inside the band at the
/// last forecast month, per nominal level.
pub fn calibration_report(
    model: &str,
    bands: &[IntervalBands],
    actual_totals: &[f64],
) -> Result<Vec<CoverageRow>> {
    if bands.len() != actual_totals.len() {
        return Err(Error::KeyMismatch(format!(
            "{} band sets for {} actual totals",
            bands.len(),
            actual_totals.len()
        )));
    }
    let Some(first) = bands.first() else {
        return Ok(Vec::new());
    };
    first
        .bands
        .iter()
        .map(|b0| {
            let mut hits = 0usize;
            for (b, &y) in bands.iter().zip(actual_totals) {
                let band = b.band(b0.level).ok_or_else(|| {
                    Error::InvalidParam(format!("study {} lacks level {}", b.study_id, b0.level))
                })?;
                let lo = band.lower.last().copied().unwrap_or(0.0);
                let hi = band.upper.last().copied().unwrap_or(0.0);
                if lo <= y && y <= hi {
                    hits += 1;
                }
            }
            Ok(CoverageRow {
                model: model.to_string(),
                level: b0.level,
                coverage: hits as f64 / bands.len() as f64,
                n: bands.len(),
            })
        })
        .collect()
}

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::fitted::FittedModel;
use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::features::{time_columns, Column, FeatureMatrix, RowKey};
use crate::trialdata::{first_reaching, milestone_targets, Milestone, SiteSpan, StudyRecord};

pub const DEFAULT_PLANNING_CAP: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Predict the observed site spans.
    Evaluation,
    /// Run forward until the expected cumulative count reaches the target.
    Planning { cap_months: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SitePlan {
    pub facility_id: String,
    pub country: String,
    pub creation: YearMonth,
}

impl From<&SiteSpan> for SitePlan {
    fn from(s: &SiteSpan) -> Self {
        SitePlan {
            facility_id: s.facility_id.clone(),
            country: s.country.clone(),
            creation: s.creation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteForecast {
    pub facility_id: String,
    pub country: String,
    /// Study months elapsed before the site's first month.
    pub offset: usize,
    /// Expected count per site month, starting at the creation month.
    pub monthly: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    pub study_id: String,
    /// Calendar month of study month 1.
    pub start: YearMonth,
    pub target: u32,
    pub sites: Vec<SiteForecast>,
    pub study_monthly: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Planning horizon ran out before the target was reached.
    pub capped: bool,
}

impl ForecastSeries {
    pub fn from_sites(
        study_id: &str,
        start: YearMonth,
        target: u32,
        sites: Vec<SiteForecast>,
    ) -> Self {
        let len = sites
            .iter()
            .map(|s| s.offset + s.monthly.len())
            .max()
            .unwrap_or(0);
        let mut study_monthly = vec![0.0; len];
        for s in &sites {
            for (m, v) in s.monthly.iter().enumerate() {
                study_monthly[s.offset + m] += v;
            }
        }
        let cumulative = running_sum(&study_monthly);
        ForecastSeries {
            study_id: study_id.to_string(),
            start,
            target,
            sites,
            study_monthly,
            cumulative,
            capped: false,
        }
    }

    pub fn months(&self) -> usize {
        self.study_monthly.len()
    }

    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Calendar month of 1-based study month `m`.
    pub fn calendar_month(&self, m: usize) -> YearMonth {
        self.start.plus(m as i32 - 1)
    }

    /// Expected cumulative count through calendar month `ym`.
    pub fn cumulative_through(&self, ym: YearMonth) -> f64 {
        let i = ym.months_since(self.start);
        if i < 0 || self.cumulative.is_empty() {
            0.0
        } else {
            self.cumulative[(i as usize).min(self.cumulative.len() - 1)]
        }
    }

    pub fn country_monthly(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &self.sites {
            let series = out
                .entry(s.country.clone())
                .or_insert_with(|| vec![0.0; self.months()]);
            for (m, v) in s.monthly.iter().enumerate() {
                series[s.offset + m] += v;
            }
        }
        out
    }

    /// 1-based study months at which the expected cumulative count first
    /// reaches the milestone counts of a total of `n`.
    pub fn milestone_months(&self, n: u32) -> [Option<usize>; 3] {
        milestone_targets(n)
            .map(|t| first_reaching(self.cumulative.iter().copied(), t as f64).map(|i| i + 1))
    }

    pub fn milestone_month(&self, m: Milestone) -> Option<usize> {
        let i = Milestone::ALL
            .iter()
            .position(|x| *x == m)
            .expect("known milestone");
        self.milestone_months(self.target)[i]
    }
}

pub fn running_sum(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xs.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn site_rows(features: &FeatureMatrix, study_id: &str) -> HashMap<String, Vec<usize>> {
    let mut out: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, k) in features.keys().iter().enumerate() {
        if k.study_id == study_id {
            out.entry(k.facility_id.clone()).or_default().push(i);
        }
    }
    for rows in out.values_mut() {
        rows.sort_by_key(|&i| features.keys()[i].month_index);
    }
    out
}

/// Site, country and study-level expected enrollment for one study.
///
/// In planning mode each site's first feature row is used as a template and
/// rolled forward with updated time features.
pub fn forecast_study(
    model: &FittedModel,
    features: &FeatureMatrix,
    study: &StudyRecord,
    sites: &[SitePlan],
    mode: ForecastMode,
) -> Result<ForecastSeries> {
    let start = sites
        .iter()
        .map(|s| s.creation)
        .min()
        .ok_or_else(|| Error::InvalidParam(format!("study {} has no sites", study.study_id)))?;
    let rows = site_rows(features, &study.study_id);
    let mut site_index = Vec::with_capacity(sites.len());
    for s in sites {
        let r = rows.get(&s.facility_id).ok_or_else(|| {
            Error::KeyMismatch(format!(
                "no feature rows for site {}/{}",
                study.study_id, s.facility_id
            ))
        })?;
        site_index.push(r);
    }
    let offsets: Vec<usize> = sites
        .iter()
        .map(|s| s.creation.months_since(start) as usize)
        .collect();
    match mode {
        ForecastMode::Evaluation => {
            let all: Vec<usize> = site_index.iter().flat_map(|r| r.iter().copied()).collect();
            let pred = model.predict(&features.select_rows(&all))?;
            let mut at = 0;
            let forecasts = sites
                .iter()
                .zip(&site_index)
                .zip(&offsets)
                .map(|((s, r), &offset)| {
                    let monthly = pred[at..at + r.len()].to_vec();
                    at += r.len();
                    SiteForecast {
                        facility_id: s.facility_id.clone(),
                        country: s.country.clone(),
                        offset,
                        monthly,
                    }
                })
                .collect();
            Ok(ForecastSeries::from_sites(
                &study.study_id,
                start,
                study.target_enrollment,
                forecasts,
            ))
        }
        ForecastMode::Planning { cap_months } => {
            if cap_months == 0 {
                return Err(Error::InvalidParam(
                    "planning horizon must be positive".into(),
                ));
            }
            let templates: Vec<usize> = site_index.iter().map(|r| r[0]).collect();
            let horizons: Vec<usize> = offsets
                .iter()
                .map(|o| cap_months.saturating_sub(*o))
                .collect();
            let synthetic = roll_forward(features, &templates, sites, &horizons)?;
            let pred = model.predict(&synthetic)?;
            let mut at = 0;
            let forecasts: Vec<SiteForecast> = sites
                .iter()
                .zip(&horizons)
                .zip(&offsets)
                .map(|((s, &h), &offset)| {
                    let monthly = pred[at..at + h].to_vec();
                    at += h;
                    SiteForecast {
                        facility_id: s.facility_id.clone(),
                        country: s.country.clone(),
                        offset,
                        monthly,
                    }
                })
                .collect();
            let full = ForecastSeries::from_sites(
                &study.study_id,
                start,
                study.target_enrollment,
                forecasts,
            );
            match first_reaching(
                full.cumulative.iter().copied(),
                study.target_enrollment as f64,
            ) {
                Some(i) => Ok(truncate(full, i + 1)),
                None => {
                    log::warn!(
                        "study {}: target {} not reached within {cap_months} months",
                        study.study_id,
                        study.target_enrollment
                    );
                    Ok(ForecastSeries {
                        capped: true,
                        ..full
                    })
                }
            }
        }
    }
}

fn truncate(series: ForecastSeries, months: usize) -> ForecastSeries {
    let sites = series
        .sites
        .into_iter()
        .map(|mut s| {
            s.monthly.truncate(months.saturating_sub(s.offset));
            s
        })
        .collect();
    let mut out = ForecastSeries::from_sites(&series.study_id, series.start, series.target, sites);
    out.study_monthly.resize(months, 0.0);
    out.cumulative = running_sum(&out.study_monthly);
    out
}

/// Repeats each template row over its site's horizon with the site-month
/// columns recomputed from the calendar.
fn roll_forward(
    features: &FeatureMatrix,
    templates: &[usize],
    sites: &[SitePlan],
    horizons: &[usize],
) -> Result<FeatureMatrix> {
    let mut source = Vec::new();
    let mut keys = Vec::new();
    let mut month_index = Vec::new();
    let mut calendar = Vec::new();
    let mut days = Vec::new();
    for ((&t, s), &h) in templates.iter().zip(sites).zip(horizons) {
        let base = &features.keys()[t];
        for m in 0..h {
            let ym = s.creation.plus(m as i32);
            source.push(t);
            keys.push(RowKey {
                study_id: base.study_id.clone(),
                facility_id: base.facility_id.clone(),
                month_index: m as u32,
            });
            month_index.push(m as f64);
            calendar.push(format!("{:02}", ym.month()));
            days.push(ym.days() as f64);
        }
    }
    let columns = features
        .columns()
        .iter()
        .map(|c| match c.name.as_str() {
            time_columns::MONTH_INDEX => Column {
                values: month_index.clone(),
                rungs: None,
                ..c.clone_meta()
            },
            time_columns::DAYS_IN_MONTH => Column {
                values: days.clone(),
                rungs: None,
                ..c.clone_meta()
            },
            time_columns::CALENDAR_MONTH => {
                let labels: Vec<Option<&str>> = calendar.iter().map(|s| Some(s.as_str())).collect();
                Column {
                    meta: c.meta.clone(),
                    ..Column::categorical(c.name.clone(), c.meta.level, &labels)
                }
            }
            _ => Column {
                values: source.iter().map(|&i| c.values[i]).collect(),
                rungs: c
                    .rungs
                    .as_ref()
                    .map(|r| source.iter().map(|&i| r[i]).collect()),
                ..c.clone_meta()
            },
        })
        .collect();
    FeatureMatrix::new(keys, columns)
}

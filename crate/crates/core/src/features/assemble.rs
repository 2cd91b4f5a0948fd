use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::history::{
    Acc, Focal, GroupVar, GroupingSpec, HistoryIndex, HistorySweep, Metric, SiteHistory,
};
use super::impute::{hierarchical_impute, ImputationLadder};
use super::matrix::{Column, ColumnKind, FeatureMatrix, Level, RowKey, MISSING};
use super::preprocess::PreprocessConfig;
use super::time_columns;
use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::trialdata::{Cohort, PanelRow, SiteMonthPanel, StudyRecord, StudySiteRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Grouping variable sets, written `"country+indication"`.
    pub groupings: Vec<String>,
    /// Metrics computed for every grouping.
    pub metrics: Vec<Metric>,
    /// Imputation ladders as grouping chains, most specific first.
    pub ladders: Vec<Vec<String>>,
    /// Metrics whose columns get imputed along each ladder.
    pub ladder_metrics: Vec<Metric>,
    pub prevalence: bool,
    pub preprocess: PreprocessConfig,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            groupings: strings(&[
                "indication",
                "indication_group",
                "therapeutic_area",
                "phase",
                "therapeutic_area+phase",
                "country",
                "country+indication",
                "country+indication_group",
                "country+therapeutic_area",
                "facility",
                "facility+indication",
                "facility+indication_group",
                "facility+therapeutic_area",
            ]),
            metrics: vec![Metric::Rate, Metric::Mcount, Metric::Nhist],
            ladders: vec![
                strings(&[
                    "facility+indication",
                    "country+indication",
                    "indication",
                    "indication_group",
                    "therapeutic_area",
                ]),
                strings(&[
                    "facility+indication_group",
                    "facility+therapeutic_area",
                    "facility",
                ]),
                strings(&[
                    "country+indication",
                    "indication",
                    "indication_group",
                    "therapeutic_area",
                ]),
                strings(&[
                    "country+indication_group",
                    "indication_group",
                    "therapeutic_area",
                ]),
                strings(&["country+therapeutic_area", "therapeutic_area"]),
                strings(&["indication", "indication_group", "therapeutic_area"]),
                strings(&["indication_group", "therapeutic_area"]),
            ],
            ladder_metrics: vec![Metric::Rate, Metric::Mcount],
            prevalence: true,
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl FeatureConfig {
    fn config_err(key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            key: format!("features.{key}"),
            message: message.into(),
        }
    }

    pub fn grouping_specs(&self) -> Result<Vec<GroupingSpec>> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for g in &self.groupings {
            for &m in &self.metrics {
                let spec = GroupingSpec::parse(g, m)
                    .map_err(|e| Self::config_err("groupings", e.to_string()))?;
                if !seen.insert(spec.column_name()) {
                    return Err(Self::config_err(
                        "groupings",
                        format!("duplicate grouping {g:?}"),
                    ));
                }
                out.push(spec);
            }
        }
        Ok(out)
    }

    pub fn imputation_ladders(&self) -> Result<Vec<ImputationLadder>> {
        let known: BTreeSet<String> = self
            .grouping_specs()?
            .iter()
            .map(|s| s.column_name())
            .collect();
        let mut out = Vec::new();
        for chain in &self.ladders {
            for &m in &self.ladder_metrics {
                let rungs = chain
                    .iter()
                    .map(|g| GroupingSpec::parse(g, m))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Self::config_err("ladders", e.to_string()))?;
                if let Some(r) = rungs.iter().find(|r| !known.contains(&r.column_name())) {
                    return Err(Self::config_err(
                        "ladders",
                        format!("rung {} is not a configured grouping", r),
                    ));
                }
                out.push(
                    ImputationLadder::new(rungs)
                        .map_err(|e| Self::config_err("ladders", e.to_string()))?,
                );
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() && !self.groupings.is_empty() {
            return Err(Self::config_err(
                "metrics",
                "at least one metric is required",
            ));
        }
        self.imputation_ladders()?;
        self.preprocess.validate("features.preprocess")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeFeatures {
    pub month_index: u32,
    pub calendar_month: u32,
    pub days_in_month: u32,
}

pub fn compute_time_features(row: &PanelRow) -> TimeFeatures {
    TimeFeatures {
        month_index: row.month_index,
        calendar_month: row.calendar_month,
        days_in_month: row.days_in_month,
    }
}

/// Per-site historical values of one focal study, in the order of its
/// panel spans.
struct FocalHistory {
    groups: Vec<Vec<f64>>,
    prev_global: f64,
    prev_country: Vec<f64>,
}

fn acc_over<'a>(
    prefix: impl Iterator<Item = &'a SiteHistory>,
    matches: impl Fn(&SiteHistory) -> bool,
) -> Option<Acc> {
    let mut acc: Option<Acc> = None;
    for s in prefix.filter(|s| matches(s)) {
        acc.get_or_insert_with(Acc::default).add(s);
    }
    acc
}

/// Joins study, country, site, historical and time features onto every
/// panel row and applies the configured imputation ladders.
pub fn assemble_design_matrix(
    cohort: &Cohort,
    panel: &SiteMonthPanel,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let specs = cfg.grouping_specs()?;
    let ladders = cfg.imputation_ladders()?;

    let site_of: HashMap<(&str, &str), &StudySiteRecord> = cohort
        .sites()
        .iter()
        .map(|s| ((s.study_id.as_str(), s.facility_id.as_str()), s))
        .collect();
    let mut focal_studies: Vec<&StudyRecord> = Vec::new();
    let mut spans_by_study: HashMap<&str, Vec<usize>> = HashMap::new();
    for (k, span) in panel.spans().iter().enumerate() {
        let study = cohort.study(&span.study_id).ok_or_else(|| {
            Error::KeyMismatch(format!("panel study {} not in cohort", span.study_id))
        })?;
        if !site_of.contains_key(&(span.study_id.as_str(), span.facility_id.as_str())) {
            return Err(Error::KeyMismatch(format!(
                "panel site {}/{} not in cohort",
                span.study_id, span.facility_id
            )));
        }
        let e = spans_by_study.entry(span.study_id.as_str()).or_default();
        if e.is_empty() {
            focal_studies.push(study);
        }
        e.push(k);
    }
    focal_studies.sort_by(|a, b| (a.ecrf_date, &a.study_id).cmp(&(b.ecrf_date, &b.study_id)));

    let mut var_sets: Vec<Vec<GroupVar>> = Vec::new();
    let spec_set: Vec<usize> = specs
        .iter()
        .map(|s| match var_sets.iter().position(|v| v == s.vars()) {
            Some(i) => i,
            None => {
                var_sets.push(s.vars().to_vec());
                var_sets.len() - 1
            }
        })
        .collect();

    let index = HistoryIndex::build(cohort);
    let mut sweep = HistorySweep::new(&index, var_sets);
    let mut history: HashMap<&str, FocalHistory> = HashMap::new();
    for study in &focal_studies {
        sweep.advance_to(study.ecrf_date);
        let spans = &spans_by_study[study.study_id.as_str()];
        // A study finished before its own ecrf date sits in the prefix and
        // must not see itself.
        let self_in_prefix = index
            .completed_before(study.ecrf_date)
            .iter()
            .any(|s| s.study_id == study.study_id);
        let mut fh = FocalHistory {
            groups: vec![Vec::with_capacity(spans.len()); specs.len()],
            prev_global: MISSING,
            prev_country: Vec::with_capacity(spans.len()),
        };
        if self_in_prefix {
            let eligible: Vec<&SiteHistory> = index.eligible(study).collect();
            let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { MISSING };
            let tot: f64 = eligible.iter().map(|s| s.count as f64).sum();
            let ind: f64 = eligible
                .iter()
                .filter(|s| s.indication == study.indication)
                .map(|s| s.count as f64)
                .sum();
            fh.prev_global = ratio(ind, tot);
            for &k in spans {
                let span = &panel.spans()[k];
                let f = Focal::new(study, &span.facility_id, &span.country);
                for (j, spec) in specs.iter().enumerate() {
                    let acc = acc_over(eligible.iter().copied(), |s| {
                        spec.vars().iter().all(|&v| {
                            let fv = f.value(v);
                            fv.is_some() && s.value(v) == fv
                        })
                    });
                    fh.groups[j].push(Acc::value(acc.as_ref(), spec.metric));
                }
                let in_country = eligible.iter().filter(|s| s.country == span.country);
                let (den, num) = in_country.fold((0.0, 0.0), |(d, n), s| {
                    let c = s.count as f64;
                    (
                        d + c,
                        if s.indication == study.indication {
                            n + c
                        } else {
                            n
                        },
                    )
                });
                fh.prev_country.push(ratio(num, den));
            }
        } else {
            fh.prev_global = sweep.prevalence_global(&study.indication);
            for &k in spans {
                let span = &panel.spans()[k];
                let f = Focal::new(study, &span.facility_id, &span.country);
                for (j, spec) in specs.iter().enumerate() {
                    fh.groups[j].push(Acc::value(sweep.lookup(spec_set[j], &f), spec.metric));
                }
                fh.prev_country
                    .push(sweep.prevalence_country(&study.indication, &span.country));
            }
        }
        history.insert(study.study_id.as_str(), fh);
    }

    let n_rows = panel.len();
    let mut keys = Vec::with_capacity(n_rows);
    let study_n_sites: HashMap<&str, (usize, usize)> = spans_by_study
        .iter()
        .map(|(&s, spans)| {
            let countries: BTreeSet<&str> = spans
                .iter()
                .map(|&k| panel.spans()[k].country.as_str())
                .collect();
            (s, (spans.len(), countries.len()))
        })
        .collect();
    let mut country_sites: HashMap<(&str, &str), usize> = HashMap::new();
    for span in panel.spans() {
        *country_sites
            .entry((&span.study_id, &span.country))
            .or_default() += 1;
    }

    let mut cat: HashMap<&'static str, Vec<Option<String>>> = HashMap::new();
    let mut num: HashMap<String, Vec<f64>> = HashMap::new();
    let mut push_cat = |name: &'static str, v: Option<String>| cat.entry(name).or_default().push(v);
    let study_extras = cohort.study_extra_columns();
    let site_extras = cohort.site_extra_columns();
    let mut group_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n_rows); specs.len()];
    let mut prev_global = Vec::with_capacity(n_rows);
    let mut prev_country = Vec::with_capacity(n_rows);

    let mut pos_in_study: HashMap<&str, usize> = HashMap::new();
    for span in panel.spans() {
        let study = cohort.study(&span.study_id).expect("checked");
        let site = site_of[&(span.study_id.as_str(), span.facility_id.as_str())];
        let fh = &history[span.study_id.as_str()];
        let pos = pos_in_study.entry(span.study_id.as_str()).or_default();
        let (n_sites, n_countries) = study_n_sites[span.study_id.as_str()];
        let ecrf = YearMonth::of(study.ecrf_date);
        for row in panel.site_rows(span) {
            keys.push(RowKey {
                study_id: row.study_id.clone(),
                facility_id: row.facility_id.clone(),
                month_index: row.month_index,
            });
            push_cat("therapeutic_area", study.therapeutic_area.clone());
            push_cat("indication_group", Some(study.indication_group.clone()));
            push_cat("indication", Some(study.indication.clone()));
            push_cat("phase", Some(study.phase.to_string()));
            push_cat("gender", Some(study.gender.to_string()));
            push_cat("sponsor_id", Some(study.sponsor_id.clone()));
            push_cat("cro_id", study.cro_id.clone());
            push_cat("country", Some(span.country.clone()));
            let t = compute_time_features(row);
            push_cat(
                time_columns::CALENDAR_MONTH,
                Some(format!("{:02}", t.calendar_month)),
            );

            let mut put = |name: &str, v: f64| num.entry(name.to_string()).or_default().push(v);
            put("target_enrollment", study.target_enrollment as f64);
            put("num_arms", study.num_arms.map_or(MISSING, f64::from));
            put("min_age", study.min_age.unwrap_or(MISSING));
            put("max_age", study.max_age.unwrap_or(MISSING));
            put("n_sites", n_sites as f64);
            put("n_countries", n_countries as f64);
            put(
                "ecrf_year",
                ecrf.year() as f64 + (ecrf.month() - 1) as f64 / 12.0,
            );
            put(
                "n_sites_country",
                country_sites[&(span.study_id.as_str(), span.country.as_str())] as f64,
            );
            put(
                "creation_lag_months",
                span.creation.months_since(ecrf) as f64,
            );
            put(time_columns::MONTH_INDEX, t.month_index as f64);
            put(time_columns::DAYS_IN_MONTH, t.days_in_month as f64);
            for (name, v) in study_extras.iter().zip(&study.extras) {
                put(name, v.unwrap_or(MISSING));
            }
            for (name, v) in site_extras.iter().zip(&site.extras) {
                put(name, v.unwrap_or(MISSING));
            }

            for (j, col) in group_cols.iter_mut().enumerate() {
                col.push(fh.groups[j][*pos]);
            }
            prev_global.push(fh.prev_global);
            prev_country.push(fh.prev_country[*pos]);
        }
        *pos += 1;
    }

    let mut columns = Vec::new();
    let mut take_cat = |name: &'static str, level: Level, columns: &mut Vec<Column>| {
        let labels = cat.remove(name).unwrap_or_default();
        let refs: Vec<Option<&str>> = labels.iter().map(|l| l.as_deref()).collect();
        columns.push(Column::categorical(name, level, &refs));
    };
    let mut take_num = |name: &str, level: Level, columns: &mut Vec<Column>| {
        let values = num.remove(name).unwrap_or_default();
        columns.push(Column::numeric(name, level, ColumnKind::Numeric, values));
    };

    for name in [
        "therapeutic_area",
        "indication_group",
        "indication",
        "phase",
        "gender",
        "sponsor_id",
        "cro_id",
    ] {
        take_cat(name, Level::Study, &mut columns);
    }
    for name in [
        "target_enrollment",
        "num_arms",
        "min_age",
        "max_age",
        "n_sites",
        "n_countries",
        "ecrf_year",
    ] {
        take_num(name, Level::Study, &mut columns);
    }
    for name in study_extras {
        take_num(name, Level::Study, &mut columns);
    }
    take_cat("country", Level::Country, &mut columns);
    take_num("n_sites_country", Level::Country, &mut columns);
    take_num("creation_lag_months", Level::Site, &mut columns);
    for name in site_extras {
        take_num(name, Level::Site, &mut columns);
    }
    if cfg.prevalence {
        columns.push(Column::numeric(
            "prev__global",
            Level::Study,
            ColumnKind::Historical,
            prev_global,
        ));
        columns.push(Column::numeric(
            "prev__country",
            Level::Country,
            ColumnKind::Historical,
            prev_country,
        ));
    }
    for (spec, values) in specs.iter().zip(group_cols) {
        columns.push(Column::numeric(
            spec.column_name(),
            spec.level(),
            ColumnKind::Historical,
            values,
        ));
    }
    take_num(time_columns::MONTH_INDEX, Level::SiteMonth, &mut columns);
    take_cat(time_columns::CALENDAR_MONTH, Level::SiteMonth, &mut columns);
    take_num(time_columns::DAYS_IN_MONTH, Level::SiteMonth, &mut columns);

    let mut m = FeatureMatrix::new(keys, columns)?;
    for ladder in &ladders {
        m = hierarchical_impute(m, ladder)?;
    }
    Ok(m)
}

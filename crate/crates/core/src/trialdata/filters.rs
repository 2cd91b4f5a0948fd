use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{enrollment_span, Cohort, Exclusion};
use crate::calendar::YearMonth;

/// Rule names written to the exclusion log, in application order.
pub mod rules {
    pub const MISSING_TA: &str = "missing_therapeutic_area";
    pub const NO_ENROLLMENT: &str = "no_enrolled_patients";
    pub const SHORT_DURATION: &str = "short_enrollment_duration";
    pub const PEDIATRIC: &str = "pediatric";
    pub const BULK_UPLOAD: &str = "bulk_upload";
    pub const OBSERVATIONAL: &str = "observational";
    pub const DEVICE: &str = "device";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Studies enrolling over fewer calendar months (first to last event,
    /// inclusive) are dropped.
    pub min_duration_months: u32,
    /// Studies with strictly more than this fraction of subjects in a single
    /// calendar month are treated as bulk uploads.
    pub bulk_fraction: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_duration_months: 4,
            bulk_fraction: 0.9,
        }
    }
}

fn first_failing_rule(
    cohort_study: &super::StudyRecord,
    events: Option<&Vec<&super::EnrollmentEvent>>,
    cfg: &FilterConfig,
) -> Option<&'static str> {
    // Erroneous or incomplete data.
    if cohort_study
        .therapeutic_area
        .as_deref()
        .is_none_or(|t| t.trim().is_empty())
    {
        return Some(rules::MISSING_TA);
    }
    let events = match events {
        Some(ev) if !ev.is_empty() => ev,
        _ => return Some(rules::NO_ENROLLMENT),
    };
    let (first, last) = enrollment_span(events).expect("non-empty");
    let duration = last.months_since(first) + 1;
    if duration < cfg.min_duration_months as i32 {
        return Some(rules::SHORT_DURATION);
    }

    let study_type = cohort_study.study_type.trim().to_ascii_lowercase();
    if study_type == "pediatric" {
        return Some(rules::PEDIATRIC);
    }

    let mut per_month: BTreeMap<YearMonth, usize> = BTreeMap::new();
    for e in events {
        *per_month
            .entry(YearMonth::of(e.enrollment_date))
            .or_default() += 1;
    }
    let peak = per_month.values().copied().max().unwrap_or(0);
    if peak as f64 > cfg.bulk_fraction * events.len() as f64 {
        return Some(rules::BULK_UPLOAD);
    }

    match study_type.as_str() {
        "observational" => Some(rules::OBSERVATIONAL),
        "device" => Some(rules::DEVICE),
        _ => None,
    }
}

/// Drops studies that fail the cohort rules, together with their sites and
/// events, appending one `(study_id, rule)` entry per removed study. Rules
/// are checked in the fixed order: incomplete data (missing TA, no
/// enrollment, short duration), pediatric, bulk upload, observational,
/// device. Each rule depends only on the study's own records, so the filter
/// is idempotent.
pub fn apply_cohort_filters(cohort: &Cohort, cfg: &FilterConfig) -> Cohort {
    let by_study = cohort.events_by_study();
    let mut keep: HashSet<&str> = HashSet::new();
    let mut log = cohort.exclusion_log.clone();
    for s in &cohort.studies {
        match first_failing_rule(s, by_study.get(s.study_id.as_str()), cfg) {
            Some(rule) => log.push(Exclusion {
                entity_id: s.study_id.clone(),
                rule: rule.to_string(),
            }),
            None => {
                keep.insert(s.study_id.as_str());
            }
        }
    }
    let mut out = cohort.restrict_to(&keep);
    out.exclusion_log = log;
    out
}

//! Trial data model: studies, study-sites and enrollment events, the cohort
//! filters, and the study-site-month panel.

mod filters;
mod io;
mod milestones;
mod panel;
mod summary;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};

pub use filters::{apply_cohort_filters, rules, FilterConfig};
pub use io::{
    load_cohort, load_cohort_with, write_cohort, write_exclusions, EVENTS_HEADER, SITES_HEADER,
    STUDIES_HEADER,
};
pub use milestones::{
    compute_milestones, first_reaching, milestone_targets, Milestone, MilestoneDates,
};
pub use panel::{build_site_month_panel, PanelRow, SiteMonthPanel, SiteSpan};
pub use summary::{summarize_cohort, StatsSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    IV,
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Phase::I),
            "II" | "2" => Ok(Phase::II),
            "III" | "3" => Ok(Phase::III),
            "IV" | "4" => Ok(Phase::IV),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::IV => "IV",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    All,
    Female,
    Male,
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "" => Ok(Gender::All),
            "female" => Ok(Gender::Female),
            "male" => Ok(Gender::Male),
            other => Err(format!("unknown gender criterion {other:?}")),
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::All => "all",
            Gender::Female => "female",
            Gender::Male => "male",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    /// eCRF finalization date, the proxy for trial initialization and the
    /// cutoff anchor for historical features.
    pub ecrf_date: NaiveDate,
    pub therapeutic_area: Option<String>,
    pub indication_group: String,
    pub indication: String,
    pub phase: Phase,
    pub sponsor_id: String,
    pub cro_id: Option<String>,
    pub target_enrollment: u32,
    pub num_arms: Option<u32>,
    pub min_age: Option<f64>,
    pub max_age: Option<f64>,
    pub gender: Gender,
    /// Free-form type tag (`interventional`, `pediatric`, `observational`,
    /// `device`, ...). Drives the type exclusions.
    pub study_type: String,
    /// Optional pre-joined numeric columns, aligned with
    /// [`Cohort::study_extra_columns`].
    pub extras: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySiteRecord {
    pub study_id: String,
    /// Facility identifier, stable across trials.
    pub facility_id: String,
    pub country: String,
    /// Record creation date, the proxy for site activation.
    pub creation_date: NaiveDate,
    pub extras: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentEvent {
    pub study_id: String,
    pub facility_id: String,
    pub patient_id: String,
    pub enrollment_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub entity_id: String,
    pub rule: String,
}

/// Integrity settings applied when a cohort is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegrityConfig {
    /// Site creation may precede the study's eCRF date by at most this many
    /// months.
    pub activation_slack_months: i32,
}

impl Default for IntegrityConfig {
    fn default() -> Self {
        IntegrityConfig {
            activation_slack_months: 12,
        }
    }
}

/// The relational trial dataset. Immutable once constructed; every
/// constructor enforces referential integrity.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    studies: Vec<StudyRecord>,
    sites: Vec<StudySiteRecord>,
    events: Vec<EnrollmentEvent>,
    exclusion_log: Vec<Exclusion>,
    study_extra_columns: Vec<String>,
    site_extra_columns: Vec<String>,
}

pub(crate) const STUDIES_FILE: &str = "studies.csv";
pub(crate) const SITES_FILE: &str = "sites.csv";
pub(crate) const EVENTS_FILE: &str = "events.csv";

impl Cohort {
    /// Builds a cohort, rejecting duplicate keys, dangling foreign keys and
    /// violated record invariants. Row numbers in errors are 1-based data
    /// rows plus one for the header line.
    pub fn new(
        studies: Vec<StudyRecord>,
        sites: Vec<StudySiteRecord>,
        events: Vec<EnrollmentEvent>,
        integrity: IntegrityConfig,
    ) -> Result<Self> {
        Self::with_extras(studies, sites, events, Vec::new(), Vec::new(), integrity)
    }

    pub fn with_extras(
        studies: Vec<StudyRecord>,
        sites: Vec<StudySiteRecord>,
        events: Vec<EnrollmentEvent>,
        study_extra_columns: Vec<String>,
        site_extra_columns: Vec<String>,
        integrity: IntegrityConfig,
    ) -> Result<Self> {
        let cohort = Cohort {
            studies,
            sites,
            events,
            exclusion_log: Vec::new(),
            study_extra_columns,
            site_extra_columns,
        };
        cohort.validate(integrity)?;
        Ok(cohort)
    }

    fn validate(&self, integrity: IntegrityConfig) -> Result<()> {
        let mut study_index: HashMap<&str, &StudyRecord> = HashMap::new();
        let mut indication_parent: HashMap<&str, &str> = HashMap::new();
        let mut group_parent: HashMap<&str, &str> = HashMap::new();
        for (i, s) in self.studies.iter().enumerate() {
            let row = i + 2;
            let bad = |message: String| Error::Integrity {
                file: STUDIES_FILE.into(),
                row,
                message,
            };
            if study_index.insert(&s.study_id, s).is_some() {
                return Err(bad(format!("duplicate study_id {}", s.study_id)));
            }
            if s.target_enrollment < 1 {
                return Err(bad("target_enrollment must be >= 1".into()));
            }
            if let (Some(lo), Some(hi)) = (s.min_age, s.max_age) {
                if lo > hi {
                    return Err(bad(format!("min_age {lo} exceeds max_age {hi}")));
                }
            }
            if s.extras.len() != self.study_extra_columns.len() {
                return Err(bad("extra column count mismatch".into()));
            }
            match indication_parent.insert(&s.indication, &s.indication_group) {
                Some(prev) if prev != s.indication_group => {
                    return Err(bad(format!(
                        "indication {} nested in both {} and {}",
                        s.indication, prev, s.indication_group
                    )))
                }
                _ => {}
            }
            if let Some(ta) = &s.therapeutic_area {
                match group_parent.insert(&s.indication_group, ta) {
                    Some(prev) if prev != ta => {
                        return Err(bad(format!(
                            "indication group {} nested in both {} and {}",
                            s.indication_group, prev, ta
                        )))
                    }
                    _ => {}
                }
            }
        }

        let mut site_index: HashMap<(&str, &str), &StudySiteRecord> = HashMap::new();
        for (i, site) in self.sites.iter().enumerate() {
            let row = i + 2;
            let Some(study) = study_index.get(site.study_id.as_str()) else {
                return Err(Error::DanglingKey {
                    file: SITES_FILE.into(),
                    row,
                    key: format!("study_id={}", site.study_id),
                });
            };
            if site_index
                .insert((&site.study_id, &site.facility_id), site)
                .is_some()
            {
                return Err(Error::Integrity {
                    file: SITES_FILE.into(),
                    row,
                    message: format!(
                        "duplicate study-site ({}, {})",
                        site.study_id, site.facility_id
                    ),
                });
            }
            let earliest = YearMonth::of(study.ecrf_date).plus(-integrity.activation_slack_months);
            if YearMonth::of(site.creation_date) < earliest {
                return Err(Error::Integrity {
                    file: SITES_FILE.into(),
                    row,
                    message: format!(
                        "creation_date {} precedes study ecrf_date {} by more than {} months",
                        site.creation_date, study.ecrf_date, integrity.activation_slack_months
                    ),
                });
            }
            if site.extras.len() != self.site_extra_columns.len() {
                return Err(Error::Integrity {
                    file: SITES_FILE.into(),
                    row,
                    message: "extra column count mismatch".into(),
                });
            }
        }

        let mut patients: HashSet<(&str, &str)> = HashSet::new();
        for (i, e) in self.events.iter().enumerate() {
            let row = i + 2;
            let Some(site) = site_index.get(&(e.study_id.as_str(), e.facility_id.as_str())) else {
                return Err(Error::DanglingKey {
                    file: EVENTS_FILE.into(),
                    row,
                    key: format!("(study_id={}, facility_id={})", e.study_id, e.facility_id),
                });
            };
            if !patients.insert((&e.study_id, &e.patient_id)) {
                return Err(Error::Integrity {
                    file: EVENTS_FILE.into(),
                    row,
                    message: format!("duplicate patient {} in study {}", e.patient_id, e.study_id),
                });
            }
            if e.enrollment_date < site.creation_date {
                return Err(Error::Integrity {
                    file: EVENTS_FILE.into(),
                    row,
                    message: format!(
                        "enrollment_date {} precedes site creation_date {}",
                        e.enrollment_date, site.creation_date
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn sites(&self) -> &[StudySiteRecord] {
        &self.sites
    }

    pub fn events(&self) -> &[EnrollmentEvent] {
        &self.events
    }

    pub fn exclusion_log(&self) -> &[Exclusion] {
        &self.exclusion_log
    }

    pub fn study_extra_columns(&self) -> &[String] {
        &self.study_extra_columns
    }

    pub fn site_extra_columns(&self) -> &[String] {
        &self.site_extra_columns
    }

    pub fn study(&self, study_id: &str) -> Option<&StudyRecord> {
        self.studies.iter().find(|s| s.study_id == study_id)
    }

    pub fn sites_of<'a>(
        &'a self,
        study_id: &'a str,
    ) -> impl Iterator<Item = &'a StudySiteRecord> + 'a {
        self.sites.iter().filter(move |s| s.study_id == study_id)
    }

    pub fn events_of<'a>(
        &'a self,
        study_id: &'a str,
    ) -> impl Iterator<Item = &'a EnrollmentEvent> + 'a {
        self.events.iter().filter(move |e| e.study_id == study_id)
    }

    /// Events grouped by study, preserving file order within each study.
    pub fn events_by_study(&self) -> HashMap<&str, Vec<&EnrollmentEvent>> {
        let mut out: HashMap<&str, Vec<&EnrollmentEvent>> = HashMap::new();
        for e in &self.events {
            out.entry(e.study_id.as_str()).or_default().push(e);
        }
        out
    }

    /// Returns a copy restricted to the given studies. The exclusion log is
    /// carried over unchanged.
    pub fn restrict_to(&self, keep: &HashSet<&str>) -> Cohort {
        Cohort {
            studies: self
                .studies
                .iter()
                .filter(|s| keep.contains(s.study_id.as_str()))
                .cloned()
                .collect(),
            sites: self
                .sites
                .iter()
                .filter(|s| keep.contains(s.study_id.as_str()))
                .cloned()
                .collect(),
            events: self
                .events
                .iter()
                .filter(|e| keep.contains(e.study_id.as_str()))
                .cloned()
                .collect(),
            exclusion_log: self.exclusion_log.clone(),
            study_extra_columns: self.study_extra_columns.clone(),
            site_extra_columns: self.site_extra_columns.clone(),
        }
    }

    /// Replaces the event list, re-running integrity checks.
    pub fn with_events(
        &self,
        events: Vec<EnrollmentEvent>,
        integrity: IntegrityConfig,
    ) -> Result<Cohort> {
        let c = Cohort {
            events,
            ..self.clone()
        };
        c.validate(integrity)?;
        Ok(c)
    }
}

/// Month of the study's first and last enrollment event.
pub(crate) fn enrollment_span(events: &[&EnrollmentEvent]) -> Option<(YearMonth, YearMonth)> {
    let first = events.iter().map(|e| e.enrollment_date).min()?;
    let last = events.iter().map(|e| e.enrollment_date).max()?;
    Some((YearMonth::of(first), YearMonth::of(last)))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    pub fn study(id: &str, ecrf: &str) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            ecrf_date: date(ecrf),
            therapeutic_area: Some("oncology".into()),
            indication_group: "solid".into(),
            indication: "lung".into(),
            phase: Phase::II,
            sponsor_id: "sp1".into(),
            cro_id: None,
            target_enrollment: 10,
            num_arms: Some(2),
            min_age: Some(18.0),
            max_age: Some(80.0),
            gender: Gender::All,
            study_type: "interventional".into(),
            extras: vec![],
        }
    }

    pub fn site(study: &str, facility: &str, country: &str, created: &str) -> StudySiteRecord {
        StudySiteRecord {
            study_id: study.into(),
            facility_id: facility.into(),
            country: country.into(),
            creation_date: date(created),
            extras: vec![],
        }
    }

    pub fn event(study: &str, facility: &str, patient: &str, d: &str) -> EnrollmentEvent {
        EnrollmentEvent {
            study_id: study.into(),
            facility_id: facility.into(),
            patient_id: patient.into(),
            enrollment_date: date(d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn dangling_event_is_rejected_with_row() {
        let err = Cohort::new(
            vec![study("S1", "2018-01-05")],
            vec![site("S1", "F1", "US", "2018-01-10")],
            vec![
                event("S1", "F1", "p1", "2018-02-01"),
                event("S1", "F9", "p2", "2018-02-01"),
            ],
            IntegrityConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::DanglingKey { file, row, .. } => {
                assert_eq!(file, "events.csv");
                assert_eq!(row, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn event_before_site_creation_is_rejected() {
        let err = Cohort::new(
            vec![study("S1", "2018-01-05")],
            vec![site("S1", "F1", "US", "2018-03-10")],
            vec![event("S1", "F1", "p1", "2018-03-01")],
            IntegrityConfig::default(),
        );
        assert!(matches!(err, Err(Error::Integrity { .. })));
    }

    #[test]
    fn indication_nesting_is_enforced() {
        let mut b = study("S2", "2018-01-05");
        b.indication_group = "heme".into();
        let err = Cohort::new(
            vec![study("S1", "2018-01-05"), b],
            vec![],
            vec![],
            IntegrityConfig::default(),
        );
        assert!(matches!(err, Err(Error::Integrity { row: 3, .. })));
    }

    #[test]
    fn early_activation_beyond_slack_is_rejected() {
        let err = Cohort::new(
            vec![study("S1", "2018-06-05")],
            vec![site("S1", "F1", "US", "2017-05-10")],
            vec![],
            IntegrityConfig::default(),
        );
        assert!(matches!(err, Err(Error::Integrity { .. })));
        Cohort::new(
            vec![study("S1", "2018-06-05")],
            vec![site("S1", "F1", "US", "2017-06-10")],
            vec![],
            IntegrityConfig::default(),
        )
        .unwrap();
    }
}

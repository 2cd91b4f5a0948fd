use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::matrix::{Level, MISSING};
use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::trialdata::{enrollment_span, Cohort, SiteMonthPanel, StudyRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupVar {
    Facility,
    Country,
    Indication,
    IndicationGroup,
    TherapeuticArea,
    Phase,
}

impl GroupVar {
    pub const ALL: [GroupVar; 6] = [
        GroupVar::Facility,
        GroupVar::Country,
        GroupVar::Indication,
        GroupVar::IndicationGroup,
        GroupVar::TherapeuticArea,
        GroupVar::Phase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupVar::Facility => "facility",
            GroupVar::Country => "country",
            GroupVar::Indication => "indication",
            GroupVar::IndicationGroup => "indication_group",
            GroupVar::TherapeuticArea => "therapeutic_area",
            GroupVar::Phase => "phase",
        }
    }

    /// Whether knowing `self` fixes the value of `other` (facilities sit in
    /// one country, indications nest in groups and areas).
    pub fn determines(self, other: GroupVar) -> bool {
        use GroupVar::*;
        self == other
            || matches!(
                (self, other),
                (Facility, Country)
                    | (Indication, IndicationGroup)
                    | (Indication, TherapeuticArea)
                    | (IndicationGroup, TherapeuticArea)
            )
    }
}

impl FromStr for GroupVar {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        GroupVar::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| format!("unknown grouping variable {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean over study-sites of count / months.
    Rate,
    /// Pooled patients per site-month.
    Mcount,
    /// Number of matching historical study-sites.
    Nhist,
}

impl Metric {
    pub fn prefix(self) -> &'static str {
        match self {
            Metric::Rate => "rate",
            Metric::Mcount => "mcount",
            Metric::Nhist => "nhist",
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rate" => Ok(Metric::Rate),
            "mcount" => Ok(Metric::Mcount),
            "nhist" => Ok(Metric::Nhist),
            o => Err(format!("unknown metric {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupingSpec {
    vars: Vec<GroupVar>,
    pub metric: Metric,
}

impl GroupingSpec {
    pub fn new(mut vars: Vec<GroupVar>, metric: Metric) -> Result<Self> {
        vars.sort();
        let n = vars.len();
        vars.dedup();
        if vars.is_empty() || vars.len() != n {
            return Err(Error::InvalidParam(
                "grouping needs a non-empty set of distinct variables".into(),
            ));
        }
        Ok(GroupingSpec { vars, metric })
    }

    /// Parses `"country+indication"`.
    pub fn parse(s: &str, metric: Metric) -> Result<Self> {
        let vars = s
            .split('+')
            .map(|v| v.parse::<GroupVar>().map_err(Error::InvalidParam))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vars, metric)
    }

    pub fn vars(&self) -> &[GroupVar] {
        &self.vars
    }

    pub fn label(&self) -> String {
        self.vars
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn column_name(&self) -> String {
        let vars: Vec<&str> = self.vars.iter().map(|v| v.name()).collect();
        format!("{}__{}", self.metric.prefix(), vars.join("_"))
    }

    pub fn level(&self) -> Level {
        if self.vars.contains(&GroupVar::Facility) {
            Level::Site
        } else if self.vars.contains(&GroupVar::Country) {
            Level::Country
        } else {
            Level::Study
        }
    }

    fn refines(&self, other: &GroupingSpec) -> bool {
        other
            .vars
            .iter()
            .all(|&o| self.vars.iter().any(|&s| s.determines(o)))
    }

    /// True when `self` partitions history strictly more coarsely than
    /// `finer`.
    pub fn is_coarser_than(&self, finer: &GroupingSpec) -> bool {
        finer.refines(self) && !self.refines(finer)
    }
}

impl fmt::Display for GroupingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.column_name())
    }
}

/// One completed historical study-site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteHistory {
    pub study_id: String,
    pub facility_id: String,
    pub country: String,
    pub indication: String,
    pub indication_group: String,
    pub therapeutic_area: Option<String>,
    pub phase: String,
    /// Date of the study's last enrollment.
    pub completion: NaiveDate,
    pub count: u32,
    pub months: u32,
}

impl SiteHistory {
    pub fn rate(&self) -> f64 {
        self.count as f64 / self.months as f64
    }

    pub(crate) fn value(&self, var: GroupVar) -> Option<&str> {
        match var {
            GroupVar::Facility => Some(&self.facility_id),
            GroupVar::Country => Some(&self.country),
            GroupVar::Indication => Some(&self.indication),
            GroupVar::IndicationGroup => Some(&self.indication_group),
            GroupVar::TherapeuticArea => self.therapeutic_area.as_deref(),
            GroupVar::Phase => Some(&self.phase),
        }
    }
}

/// Grouping values of a focal study-site.
pub(crate) struct Focal<'a> {
    pub study: &'a StudyRecord,
    pub phase: String,
    pub facility: &'a str,
    pub country: &'a str,
}

impl<'a> Focal<'a> {
    pub fn new(study: &'a StudyRecord, facility: &'a str, country: &'a str) -> Self {
        Focal {
            study,
            phase: study.phase.to_string(),
            facility,
            country,
        }
    }

    pub(crate) fn value(&self, var: GroupVar) -> Option<&str> {
        match var {
            GroupVar::Facility => Some(self.facility),
            GroupVar::Country => Some(self.country),
            GroupVar::Indication => Some(&self.study.indication),
            GroupVar::IndicationGroup => Some(&self.study.indication_group),
            GroupVar::TherapeuticArea => self.study.therapeutic_area.as_deref(),
            GroupVar::Phase => Some(&self.phase),
        }
    }
}

fn group_key<'k>(vars: &[GroupVar], value: impl Fn(GroupVar) -> Option<&'k str>) -> Option<String> {
    let mut key = String::new();
    for (i, &v) in vars.iter().enumerate() {
        if i > 0 {
            key.push('\u{1f}');
        }
        key.push_str(value(v)?);
    }
    Some(key)
}

/// All study-sites of the cohort ordered by (completion, study, facility),
/// so the history available at any date is a prefix.
#[derive(Debug, Clone, Default)]
pub struct HistoryIndex {
    sites: Vec<SiteHistory>,
}

impl HistoryIndex {
    pub fn build(cohort: &Cohort) -> Self {
        let by_study = cohort.events_by_study();
        let mut counts: HashMap<(&str, &str), u32> = HashMap::new();
        for e in cohort.events() {
            *counts.entry((&e.study_id, &e.facility_id)).or_default() += 1;
        }
        let mut sites = Vec::new();
        for site in cohort.sites() {
            let Some(events) = by_study.get(site.study_id.as_str()) else {
                continue;
            };
            let Some((_, last)) = enrollment_span(events) else {
                continue;
            };
            let study = cohort.study(&site.study_id).expect("integrity");
            let completion = events
                .iter()
                .map(|e| e.enrollment_date)
                .max()
                .expect("non-empty");
            let months = last.months_since(YearMonth::of(site.creation_date)).max(0) as u32 + 1;
            sites.push(SiteHistory {
                study_id: site.study_id.clone(),
                facility_id: site.facility_id.clone(),
                country: site.country.clone(),
                indication: study.indication.clone(),
                indication_group: study.indication_group.clone(),
                therapeutic_area: study.therapeutic_area.clone(),
                phase: study.phase.to_string(),
                completion,
                count: counts
                    .get(&(site.study_id.as_str(), site.facility_id.as_str()))
                    .copied()
                    .unwrap_or(0),
                months,
            });
        }
        sites.sort_by(|a, b| {
            (a.completion, &a.study_id, &a.facility_id).cmp(&(
                b.completion,
                &b.study_id,
                &b.facility_id,
            ))
        });
        HistoryIndex { sites }
    }

    pub fn sites(&self) -> &[SiteHistory] {
        &self.sites
    }

    /// Study-sites whose study completed strictly before `cutoff`.
    pub fn completed_before(&self, cutoff: NaiveDate) -> &[SiteHistory] {
        &self.sites[..self.sites.partition_point(|s| s.completion < cutoff)]
    }

    /// Eligible history for a focal study: completed before its ecrf date,
    /// never the study itself.
    pub fn eligible<'a>(
        &'a self,
        focal: &'a StudyRecord,
    ) -> impl Iterator<Item = &'a SiteHistory> + 'a {
        self.completed_before(focal.ecrf_date)
            .iter()
            .filter(move |s| s.study_id != focal.study_id)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Acc {
    n: u32,
    sum_rate: f64,
    sum_count: f64,
    sum_months: f64,
}

impl Acc {
    pub(crate) fn add(&mut self, s: &SiteHistory) {
        self.n += 1;
        self.sum_rate += s.rate();
        self.sum_count += s.count as f64;
        self.sum_months += s.months as f64;
    }

    pub fn value(acc: Option<&Acc>, metric: Metric) -> f64 {
        match (acc, metric) {
            (None, Metric::Nhist) => 0.0,
            (None, _) => MISSING,
            (Some(a), Metric::Rate) => a.sum_rate / a.n as f64,
            (Some(a), Metric::Mcount) => a.sum_count / a.sum_months,
            (Some(a), Metric::Nhist) => a.n as f64,
        }
    }
}

/// Running group accumulators over a growing history prefix.
pub(crate) struct HistorySweep<'a> {
    index: &'a HistoryIndex,
    pos: usize,
    var_sets: Vec<Vec<GroupVar>>,
    groups: Vec<HashMap<String, Acc>>,
    patients_total: f64,
    patients_by_indication: HashMap<String, f64>,
    patients_by_country: HashMap<String, f64>,
    patients_by_country_indication: HashMap<(String, String), f64>,
}

impl<'a> HistorySweep<'a> {
    pub fn new(index: &'a HistoryIndex, var_sets: Vec<Vec<GroupVar>>) -> Self {
        let groups = vec![HashMap::new(); var_sets.len()];
        HistorySweep {
            index,
            pos: 0,
            var_sets,
            groups,
            patients_total: 0.0,
            patients_by_indication: HashMap::new(),
            patients_by_country: HashMap::new(),
            patients_by_country_indication: HashMap::new(),
        }
    }

    /// Absorbs history completed before `cutoff`; cutoffs must be
    /// non-decreasing across calls.
    pub fn advance_to(&mut self, cutoff: NaiveDate) {
        let end = self.index.sites.partition_point(|s| s.completion < cutoff);
        for s in &self.index.sites[self.pos.min(end)..end] {
            for (vars, groups) in self.var_sets.iter().zip(self.groups.iter_mut()) {
                if let Some(k) = group_key(vars, |v| s.value(v)) {
                    groups.entry(k).or_default().add(s);
                }
            }
            let c = s.count as f64;
            self.patients_total += c;
            *self
                .patients_by_indication
                .entry(s.indication.clone())
                .or_default() += c;
            *self
                .patients_by_country
                .entry(s.country.clone())
                .or_default() += c;
            *self
                .patients_by_country_indication
                .entry((s.country.clone(), s.indication.clone()))
                .or_default() += c;
        }
        self.pos = self.pos.max(end);
    }

    pub fn lookup(&self, set: usize, focal: &Focal<'_>) -> Option<&Acc> {
        let key = group_key(&self.var_sets[set], |v| focal.value(v))?;
        self.groups[set].get(&key)
    }

    pub fn prevalence_global(&self, indication: &str) -> f64 {
        if self.patients_total > 0.0 {
            self.patients_by_indication
                .get(indication)
                .copied()
                .unwrap_or(0.0)
                / self.patients_total
        } else {
            MISSING
        }
    }

    pub fn prevalence_country(&self, indication: &str, country: &str) -> f64 {
        match self.patients_by_country.get(country) {
            Some(&tot) if tot > 0.0 => {
                self.patients_by_country_indication
                    .get(&(country.to_string(), indication.to_string()))
                    .copied()
                    .unwrap_or(0.0)
                    / tot
            }
            _ => MISSING,
        }
    }
}

/// Direct evaluation of one historical grouping feature for every panel row
/// of `focal`, in panel order.
pub fn compute_group_history_feature(
    cohort: &Cohort,
    panel: &SiteMonthPanel,
    spec: &GroupingSpec,
    focal: &StudyRecord,
) -> Vec<f64> {
    let index = HistoryIndex::build(cohort);
    let eligible: Vec<&SiteHistory> = index.eligible(focal).collect();
    let mut out = Vec::new();
    for span in panel.spans_of(&focal.study_id) {
        let f = Focal::new(focal, &span.facility_id, &span.country);
        let key = group_key(spec.vars(), |v| f.value(v));
        let mut acc: Option<Acc> = None;
        if let Some(key) = key {
            for s in &eligible {
                if group_key(spec.vars(), |v| s.value(v)).as_deref() == Some(key.as_str()) {
                    acc.get_or_insert_with(Acc::default).add(s);
                }
            }
        }
        let v = Acc::value(acc.as_ref(), spec.metric);
        out.extend(std::iter::repeat_n(v, span.months()));
    }
    out
}

/// Historical share of patients in the focal indication, overall and within
/// each country the focal study recruits in.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceFeatures {
    pub global: f64,
    pub by_country: BTreeMap<String, f64>,
}

pub fn compute_prevalence_features(cohort: &Cohort, focal: &StudyRecord) -> PrevalenceFeatures {
    let index = HistoryIndex::build(cohort);
    let (mut total, mut ind) = (0.0, 0.0);
    let mut country_tot: HashMap<&str, (f64, f64)> = HashMap::new();
    for s in index.eligible(focal) {
        let c = s.count as f64;
        let hit = s.indication == focal.indication;
        total += c;
        if hit {
            ind += c;
        }
        let e = country_tot.entry(s.country.as_str()).or_default();
        e.0 += c;
        if hit {
            e.1 += c;
        }
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { MISSING };
    let by_country = cohort
        .sites_of(&focal.study_id)
        .map(|site| {
            let (den, num) = country_tot
                .get(site.country.as_str())
                .copied()
                .unwrap_or_default();
            (site.country.clone(), ratio(num, den))
        })
        .collect();
    PrevalenceFeatures {
        global: ratio(ind, total),
        by_country,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trialdata::testutil::*;
    use crate::trialdata::{build_site_month_panel, IntegrityConfig};

    fn onc(id: &str, ecrf: &str, indication: &str) -> StudyRecord {
        let mut s = study(id, ecrf);
        s.indication = indication.into();
        s
    }

    /// Two US history sites with rates 0.5 and 1.5, one completing late,
    /// one German site.
    fn cohort() -> Cohort {
        Cohort::new(
            vec![
                onc("H1", "2015-01-01", "A"),
                onc("H2", "2015-01-01", "A"),
                onc("LATE", "2015-01-01", "A"),
                onc("FOC", "2017-01-01", "A"),
            ],
            vec![
                site("H1", "F1", "US", "2015-01-10"),
                site("H2", "F2", "US", "2015-01-10"),
                site("H2", "F3", "DE", "2015-01-10"),
                site("LATE", "F4", "US", "2015-01-10"),
                site("FOC", "F1", "US", "2017-01-10"),
                site("FOC", "F9", "FR", "2017-01-10"),
            ],
            vec![
                // H1: 2 patients over Jan..Apr 2015 -> rate 0.5
                event("H1", "F1", "a", "2015-01-20"),
                event("H1", "F1", "b", "2015-04-20"),
                // H2: F2 3 patients over Jan..Feb -> 1.5; F3 none
                event("H2", "F2", "c", "2015-01-20"),
                event("H2", "F2", "d", "2015-02-01"),
                event("H2", "F2", "e", "2015-02-20"),
                // LATE completes after the focal date
                event("LATE", "F4", "f", "2015-02-01"),
                event("LATE", "F4", "g", "2017-06-01"),
                event("FOC", "F1", "h", "2017-02-01"),
            ],
            IntegrityConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn country_rate_is_mean_of_qualifying_sites() {
        let c = cohort();
        let p = build_site_month_panel(&c).unwrap();
        let spec = GroupingSpec::parse("country", Metric::Rate).unwrap();
        let v = compute_group_history_feature(&c, &p, &spec, c.study("FOC").unwrap());
        // FOC spans Jan..Feb 2017 for both sites: F1 (US) rows then F9 (FR).
        assert_eq!(v.len(), 4);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 1.0);
        assert!(v[2].is_nan() && v[3].is_nan());
    }

    #[test]
    fn pooled_count_and_support() {
        let c = cohort();
        let p = build_site_month_panel(&c).unwrap();
        let f = c.study("FOC").unwrap();
        let mc = GroupingSpec::parse("country", Metric::Mcount).unwrap();
        // (2 + 3) / (4 + 2)
        assert_eq!(compute_group_history_feature(&c, &p, &mc, f)[0], 5.0 / 6.0);
        let n = GroupingSpec::parse("indication", Metric::Nhist).unwrap();
        assert_eq!(compute_group_history_feature(&c, &p, &n, f), vec![3.0; 4]);
        let fac = GroupingSpec::parse("facility+indication", Metric::Nhist).unwrap();
        assert_eq!(
            compute_group_history_feature(&c, &p, &fac, f),
            vec![1.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn prevalence_ratio() {
        let mut c = cohort();
        let mut studies = c.studies().to_vec();
        studies[1].indication = "B".into();
        c = Cohort::new(
            studies,
            c.sites().to_vec(),
            c.events().to_vec(),
            IntegrityConfig::default(),
        )
        .unwrap();
        let p = compute_prevalence_features(&c, c.study("FOC").unwrap());
        // 2 patients in A, 3 in B.
        assert_eq!(p.global, 0.4);
        assert_eq!(p.by_country["US"], 0.4);
        assert!(p.by_country["FR"].is_nan());
    }

    #[test]
    fn no_history_is_missing() {
        let c = cohort();
        let p = compute_prevalence_features(&c, c.study("H1").unwrap());
        assert!(p.global.is_nan());
    }

    #[test]
    fn coarsening_relation() {
        let g = |s| GroupingSpec::parse(s, Metric::Rate).unwrap();
        assert!(g("country+indication").is_coarser_than(&g("facility+indication")));
        assert!(g("indication_group").is_coarser_than(&g("indication")));
        assert!(g("therapeutic_area").is_coarser_than(&g("indication_group")));
        assert!(!g("indication").is_coarser_than(&g("indication")));
        assert!(!g("country").is_coarser_than(&g("indication")));
        assert!(!g("facility").is_coarser_than(&g("country")));
        assert!(g("facility").is_coarser_than(&g("facility+indication")));
    }

    #[test]
    fn spec_validation() {
        assert!(GroupingSpec::new(vec![], Metric::Rate).is_err());
        assert!(
            GroupingSpec::new(vec![GroupVar::Country, GroupVar::Country], Metric::Rate).is_err()
        );
        assert!(GroupingSpec::parse("planet", Metric::Rate).is_err());
        let s = GroupingSpec::parse("indication+country", Metric::Rate).unwrap();
        assert_eq!(s.column_name(), "rate__country_indication");
        assert_eq!(s.level(), Level::Country);
    }
}

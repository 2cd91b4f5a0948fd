use serde::{Deserialize, Serialize};

use super::{build_site_month_panel, enrollment_span, Cohort};
use crate::error::{Error, Result};
use crate::stats::SummaryRow;

/// The enrollment statistics table of a modeling cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    /// Months from first to last enrollment, inclusive.
    pub trial_duration: SummaryRow,
    pub trial_total: SummaryRow,
    /// Panel months per study-site.
    pub site_duration: SummaryRow,
    pub site_total: SummaryRow,
    pub site_month_count: SummaryRow,
    pub non_enrolling_fraction: SummaryRow,
}

impl StatsSummary {
    pub fn rows(&self) -> [(&'static str, &SummaryRow); 6] {
        [
            ("trial_enrollment_duration_months", &self.trial_duration),
            ("trial_total_enrollment", &self.trial_total),
            ("site_enrollment_duration_months", &self.site_duration),
            ("site_total_enrollment", &self.site_total),
            ("site_month_enrollment", &self.site_month_count),
            ("non_enrolling_site_fraction", &self.non_enrolling_fraction),
        ]
    }
}

pub fn summarize_cohort(cohort: &Cohort) -> Result<StatsSummary> {
    if cohort.studies().is_empty() || cohort.sites().is_empty() {
        return Err(Error::EmptyCohort);
    }
    let panel = build_site_month_panel(cohort)?;
    let by_study = cohort.events_by_study();

    let mut trial_duration = Vec::new();
    let mut trial_total = Vec::new();
    let mut non_enrolling = Vec::new();
    for s in cohort.studies() {
        let events = &by_study[s.study_id.as_str()];
        let (first, last) = enrollment_span(events).expect("panel built");
        trial_duration.push(f64::from(last.months_since(first) + 1));
        trial_total.push(events.len() as f64);
        let totals: Vec<u32> = panel
            .spans_of(&s.study_id)
            .map(|sp| panel.site_rows(sp).iter().map(|r| r.enrolled_count).sum())
            .collect();
        if !totals.is_empty() {
            let zeros = totals.iter().filter(|&&t| t == 0).count();
            non_enrolling.push(zeros as f64 / totals.len() as f64);
        }
    }
    let site_duration: Vec<f64> = panel.spans().iter().map(|s| s.months() as f64).collect();
    let site_total: Vec<f64> = panel
        .spans()
        .iter()
        .map(|sp| {
            panel
                .site_rows(sp)
                .iter()
                .map(|r| f64::from(r.enrolled_count))
                .sum()
        })
        .collect();
    let site_month: Vec<f64> = panel
        .rows()
        .iter()
        .map(|r| f64::from(r.enrolled_count))
        .collect();

    let row = |xs: &[f64]| SummaryRow::of(xs).ok_or(Error::EmptyCohort);
    Ok(StatsSummary {
        trial_duration: row(&trial_duration)?,
        trial_total: row(&trial_total)?,
        site_duration: row(&site_duration)?,
        site_total: row(&site_total)?,
        site_month_count: row(&site_month)?,
        non_enrolling_fraction: row(&non_enrolling)?,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::IntegrityConfig;
    use super::*;

    #[test]
    fn non_enrolling_fraction() {
        let events = (0..4)
            .map(|i| event("S1", "B", &format!("p{i}"), &format!("2018-0{}-10", i + 2)))
            .collect();
        let c = Cohort::new(
            vec![study("S1", "2017-12-01")],
            vec![
                site("S1", "A", "US", "2018-01-15"),
                site("S1", "B", "US", "2018-01-15"),
            ],
            events,
            IntegrityConfig::default(),
        )
        .unwrap();
        let s = summarize_cohort(&c).unwrap();
        assert_eq!(s.non_enrolling_fraction.mean, 0.5);
        assert_eq!(s.site_total.max, 4.0);
        assert_eq!(s.trial_duration.mean, 4.0);
    }

    #[test]
    fn all_sites_enrolling() {
        let c = Cohort::new(
            vec![study("S1", "2017-12-01")],
            vec![site("S1", "A", "US", "2018-01-15")],
            vec![event("S1", "A", "p", "2018-02-01")],
            IntegrityConfig::default(),
        )
        .unwrap();
        assert_eq!(
            summarize_cohort(&c).unwrap().non_enrolling_fraction.max,
            0.0
        );
    }

    #[test]
    fn empty_cohort_errors() {
        let c = Cohort::new(vec![], vec![], vec![], IntegrityConfig::default()).unwrap();
        assert!(matches!(summarize_cohort(&c), Err(Error::EmptyCohort)));
    }
}

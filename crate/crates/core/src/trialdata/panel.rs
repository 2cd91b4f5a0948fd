use std::collections::HashMap;
use std::ops::Range;

use super::{enrollment_span, Cohort};
use crate::calendar::YearMonth;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelRow {
    pub study_id: String,
    pub facility_id: String,
    /// Calendar-month boundaries crossed since the site's creation month.
    pub month_index: u32,
    pub year: i32,
    /// 1..=12
    pub calendar_month: u32,
    pub days_in_month: u32,
    pub enrolled_count: u32,
}

impl PanelRow {
    pub fn year_month(&self) -> YearMonth {
        YearMonth::new(self.year, self.calendar_month)
    }
}

/// Contiguous block of panel rows belonging to one study-site.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpan {
    pub study_id: String,
    pub facility_id: String,
    pub country: String,
    pub creation: YearMonth,
    pub rows: Range<usize>,
}

impl SiteSpan {
    pub fn months(&self) -> usize {
        self.rows.len()
    }
}

/// The study-site-month grid. Rows are sorted by `(study_id, facility_id,
/// month_index)` and every site covers `0..=k` without gaps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SiteMonthPanel {
    rows: Vec<PanelRow>,
    spans: Vec<SiteSpan>,
}

impl SiteMonthPanel {
    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn spans(&self) -> &[SiteSpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn site_rows(&self, span: &SiteSpan) -> &[PanelRow] {
        &self.rows[span.rows.clone()]
    }

    pub fn span_of(&self, study_id: &str, facility_id: &str) -> Option<&SiteSpan> {
        self.spans
            .binary_search_by(|s| {
                (s.study_id.as_str(), s.facility_id.as_str()).cmp(&(study_id, facility_id))
            })
            .ok()
            .map(|i| &self.spans[i])
    }

    pub fn spans_of<'a>(&'a self, study_id: &'a str) -> impl Iterator<Item = &'a SiteSpan> + 'a {
        let start = self
            .spans
            .partition_point(|s| s.study_id.as_str() < study_id);
        self.spans[start..]
            .iter()
            .take_while(move |s| s.study_id == study_id)
    }

    /// Sub-panel containing only the listed studies, re-indexed.
    pub fn restrict<F: Fn(&str) -> bool>(&self, keep: F) -> SiteMonthPanel {
        let mut out = SiteMonthPanel::default();
        for span in &self.spans {
            if !keep(&span.study_id) {
                continue;
            }
            let start = out.rows.len();
            out.rows.extend_from_slice(&self.rows[span.rows.clone()]);
            out.spans.push(SiteSpan {
                rows: start..out.rows.len(),
                ..span.clone()
            });
        }
        out
    }
}

/// Expands a filtered cohort into one row per study-site per calendar month
/// from the site's creation month through the study's last enrollment month.
/// A site created after that month contributes a single zero row.
pub fn build_site_month_panel(cohort: &Cohort) -> Result<SiteMonthPanel> {
    let by_study = cohort.events_by_study();
    let mut end_month: HashMap<&str, YearMonth> = HashMap::new();
    for s in cohort.studies() {
        let events = by_study
            .get(s.study_id.as_str())
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::NoEvents(s.study_id.clone()))?;
        let (_, last) = enrollment_span(events).expect("non-empty");
        end_month.insert(&s.study_id, last);
    }

    let mut counts: HashMap<(&str, &str, YearMonth), u32> = HashMap::new();
    for e in cohort.events() {
        *counts
            .entry((
                &e.study_id,
                &e.facility_id,
                YearMonth::of(e.enrollment_date),
            ))
            .or_default() += 1;
    }

    let mut sites: Vec<_> = cohort.sites().iter().collect();
    sites.sort_by(|a, b| (&a.study_id, &a.facility_id).cmp(&(&b.study_id, &b.facility_id)));

    let mut panel = SiteMonthPanel::default();
    for site in sites {
        let creation = YearMonth::of(site.creation_date);
        let end = end_month[site.study_id.as_str()];
        let n_months = end.months_since(creation).max(0) + 1;
        let start = panel.rows.len();
        for m in 0..n_months {
            let ym = creation.plus(m);
            panel.rows.push(PanelRow {
                study_id: site.study_id.clone(),
                facility_id: site.facility_id.clone(),
                month_index: m as u32,
                year: ym.year(),
                calendar_month: ym.month(),
                days_in_month: ym.days(),
                enrolled_count: counts
                    .get(&(site.study_id.as_str(), site.facility_id.as_str(), ym))
                    .copied()
                    .unwrap_or(0),
            });
        }
        panel.spans.push(SiteSpan {
            study_id: site.study_id.clone(),
            facility_id: site.facility_id.clone(),
            country: site.country.clone(),
            creation,
            rows: start..panel.rows.len(),
        });
    }
    Ok(panel)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::IntegrityConfig;
    use super::*;

    #[test]
    fn counts_per_month_from_creation() {
        let c = Cohort::new(
            vec![study("S1", "2017-12-01")],
            vec![
                site("S1", "A", "US", "2018-01-15"),
                site("S1", "B", "US", "2018-01-20"),
            ],
            vec![
                event("S1", "A", "p1", "2018-02-03"),
                event("S1", "A", "p2", "2018-02-03"),
                event("S1", "B", "p3", "2018-04-30"),
            ],
            IntegrityConfig::default(),
        )
        .unwrap();
        let p = build_site_month_panel(&c).unwrap();
        let a: Vec<u32> = p
            .site_rows(p.span_of("S1", "A").unwrap())
            .iter()
            .map(|r| r.enrolled_count)
            .collect();
        assert_eq!(a, vec![0, 2, 0, 0]);
        let b = p.site_rows(p.span_of("S1", "B").unwrap());
        assert_eq!(
            b.iter().map(|r| r.month_index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(b[1].calendar_month, 2);
        assert_eq!(b[1].days_in_month, 28);
    }

    #[test]
    fn late_site_gets_single_zero_row() {
        let c = Cohort::new(
            vec![study("S1", "2017-12-01")],
            vec![
                site("S1", "A", "US", "2018-01-15"),
                site("S1", "Z", "FR", "2018-09-01"),
            ],
            vec![event("S1", "A", "p1", "2018-04-03")],
            IntegrityConfig::default(),
        )
        .unwrap();
        let p = build_site_month_panel(&c).unwrap();
        let z = p.site_rows(p.span_of("S1", "Z").unwrap());
        assert_eq!(z.len(), 1);
        assert_eq!((z[0].month_index, z[0].enrolled_count), (0, 0));
    }

    #[test]
    fn study_without_events_is_a_filtering_bug() {
        let c = Cohort::new(
            vec![study("S1", "2017-12-01")],
            vec![site("S1", "A", "US", "2018-01-15")],
            vec![],
            IntegrityConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            build_site_month_panel(&c),
            Err(Error::NoEvents(_))
        ));
    }
}

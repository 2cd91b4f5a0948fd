use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::calendar::YearMonth;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Milestone {
    Half,
    Ninety,
    Last,
}

impl Milestone {
    pub const ALL: [Milestone; 3] = [Milestone::Half, Milestone::Ninety, Milestone::Last];

    pub fn label(self) -> &'static str {
        match self {
            Milestone::Half => "50pct_pe",
            Milestone::Ninety => "90pct_pe",
            Milestone::Last => "last_pe",
        }
    }
}

/// Patient counts that define the three milestones for a total of `n`:
/// `ceil(n/2)`, `ceil(9n/10)` and `n`, computed in integers.
pub fn milestone_targets(n: u32) -> [u32; 3] {
    let n = n as u64;
    [n.div_ceil(2) as u32, (9 * n).div_ceil(10) as u32, n as u32]
}

/// Index of the first element of a cumulative series reaching `target`.
pub fn first_reaching<I: IntoIterator<Item = f64>>(cumulative: I, target: f64) -> Option<usize> {
    cumulative.into_iter().position(|c| c >= target)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilestoneDates {
    pub total: u32,
    pub half: YearMonth,
    pub ninety: YearMonth,
    pub last: YearMonth,
}

impl MilestoneDates {
    pub fn get(&self, m: Milestone) -> YearMonth {
        match m {
            Milestone::Half => self.half,
            Milestone::Ninety => self.ninety,
            Milestone::Last => self.last,
        }
    }
}

/// Calendar months at which cumulative study enrollment first reaches 50%,
/// 90% and 100% of the study's enrolled total.
pub fn compute_milestones(cohort: &Cohort, study_id: &str) -> Result<MilestoneDates> {
    if cohort.study(study_id).is_none() {
        return Err(Error::UnknownStudy(study_id.to_string()));
    }
    let mut monthly: BTreeMap<YearMonth, u32> = BTreeMap::new();
    for e in cohort.events_of(study_id) {
        *monthly.entry(YearMonth::of(e.enrollment_date)).or_default() += 1;
    }
    if monthly.is_empty() {
        return Err(Error::NoEvents(study_id.to_string()));
    }
    let total: u32 = monthly.values().sum();
    let targets = milestone_targets(total);
    let months: Vec<YearMonth> = monthly.keys().copied().collect();
    let mut cum = 0u32;
    let cumulative: Vec<u32> = monthly
        .values()
        .map(|c| {
            cum += c;
            cum
        })
        .collect();
    let at = |t: u32| {
        months[cumulative
            .iter()
            .position(|&c| c >= t)
            .expect("total reached")]
    };
    Ok(MilestoneDates {
        total,
        half: at(targets[0]),
        ninety: at(targets[1]),
        last: at(targets[2]),
    })
}

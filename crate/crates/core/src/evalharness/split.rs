use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::Quarter;
use crate::error::{Error, Result};
use crate::trialdata::Cohort;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assignment {
    /// 0-based discovery fold.
    Fold(usize),
    Holdout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub holdout_fraction: f64,
    pub k_folds: usize,
    pub assignment: BTreeMap<String, Assignment>,
}

impl SplitPlan {
    pub fn holdout(&self) -> BTreeSet<&str> {
        self.studies_where(|a| a == Assignment::Holdout)
    }

    pub fn discovery(&self) -> BTreeSet<&str> {
        self.studies_where(|a| a != Assignment::Holdout)
    }

    pub fn fold(&self, k: usize) -> BTreeSet<&str> {
        self.studies_where(|a| a == Assignment::Fold(k))
    }

    fn studies_where(&self, f: impl Fn(Assignment) -> bool) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, a)| f(**a))
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Seeded study-level partition into `k_folds` discovery folds and a
/// holdout of `round(n * holdout_fraction)` studies.
pub fn make_random_split(
    study_ids: &[String],
    holdout_fraction: f64,
    k_folds: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidParam(format!(
            "holdout fraction {holdout_fraction} outside [0,1)"
        )));
    }
    if k_folds < 2 {
        return Err(Error::InvalidParam("need at least two folds".into()));
    }
    let mut ids: Vec<&String> = study_ids
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() != study_ids.len() {
        return Err(Error::InvalidParam("duplicate study ids".into()));
    }
    if ids.len() < k_folds + 1 {
        return Err(Error::InvalidParam(format!(
            "{} studies is too few for {k_folds} folds plus a holdout",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_holdout = (ids.len() as f64 * holdout_fraction).round() as usize;
    if ids.len() - n_holdout < k_folds {
        return Err(Error::InvalidParam(
            "too few discovery studies for the folds".into(),
        ));
    }
    let assignment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let a = if i < n_holdout {
                Assignment::Holdout
            } else {
                Assignment::Fold((i - n_holdout) % k_folds)
            };
            ((*id).clone(), a)
        })
        .collect();
    Ok(SplitPlan {
        seed,
        holdout_fraction,
        k_folds,
        assignment,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollingSplit {
    pub quarter: Quarter,
    /// Studies initiated strictly before the quarter starts.
    pub train: BTreeSet<String>,
    /// Studies initiated within the quarter.
    pub test: BTreeSet<String>,
}

/// One split per quarter in `[start, end]`; quarters with an empty train or
/// test set are skipped.
pub fn make_rolling_time_split(
    cohort: &Cohort,
    start: Quarter,
    end: Quarter,
) -> Result<Vec<RollingSplit>> {
    if end < start {
        return Err(Error::InvalidParam(format!(
            "empty quarter range {start}..{end}"
        )));
    }
    let mut out = Vec::new();
    let mut q = start;
    while q <= end {
        let (from, to) = (q.start(), q.next().start());
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for s in cohort.studies() {
            if s.ecrf_date < from {
                train.insert(s.study_id.clone());
            } else if s.ecrf_date < to {
                test.insert(s.study_id.clone());
            }
        }
        if train.is_empty() {
            log::info!("{q}: no studies initiated earlier, skipped");
        } else if test.is_empty() {
            log::info!("{q}: no studies initiated in the quarter, skipped");
        } else {
            out.push(RollingSplit {
                quarter: q,
                train,
                test,
            });
        }
        q = q.next();
    }
    Ok(out)
}

use super::history::GroupingSpec;
use super::matrix::{is_missing, FeatureMatrix};
use crate::error::{Error, Result};

/// Rung value recorded for rows that stay missing after the full walk.
pub const EXHAUSTED_RUNG: u8 = u8::MAX;

/// Fallback chain from a target grouping feature to progressively coarser
/// groupings of the same metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationLadder {
    rungs: Vec<GroupingSpec>,
}

impl ImputationLadder {
    pub fn new(rungs: Vec<GroupingSpec>) -> Result<Self> {
        if rungs.len() < 2 || rungs.len() >= EXHAUSTED_RUNG as usize {
            return Err(Error::InvalidParam(
                "a ladder needs a target and at least one fallback".into(),
            ));
        }
        for w in rungs.windows(2) {
            if w[1].metric != w[0].metric {
                return Err(Error::InvalidParam(format!(
                    "ladder mixes metrics at {}",
                    w[1]
                )));
            }
            if !w[1].is_coarser_than(&w[0]) {
                return Err(Error::InvalidParam(format!(
                    "{} is not coarser than {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(ImputationLadder { rungs })
    }

    pub fn target(&self) -> &GroupingSpec {
        &self.rungs[0]
    }

    pub fn rungs(&self) -> &[GroupingSpec] {
        &self.rungs
    }

    pub fn column_names(&self) -> Vec<String> {
        self.rungs.iter().map(|r| r.column_name()).collect()
    }
}

/// Fills missing values of the ladder's target column with the first
/// non-missing value up the ladder and records the rung used per row.
pub fn hierarchical_impute(
    mut matrix: FeatureMatrix,
    ladder: &ImputationLadder,
) -> Result<FeatureMatrix> {
    let names = ladder.column_names();
    let idx = names
        .iter()
        .map(|n| {
            matrix
                .column_index(n)
                .ok_or_else(|| Error::UnknownColumn(n.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallbacks: Vec<Vec<f64>> = idx[1..]
        .iter()
        .map(|&j| matrix.columns()[j].values.clone())
        .collect();
    let target = &mut matrix.columns_mut()[idx[0]];
    let mut rungs = vec![0u8; target.values.len()];
    for (i, v) in target.values.iter_mut().enumerate() {
        if !is_missing(*v) {
            continue;
        }
        match fallbacks.iter().position(|f| !is_missing(f[i])) {
            Some(r) => {
                *v = fallbacks[r][i];
                rungs[i] = r as u8 + 1;
            }
            None => rungs[i] = EXHAUSTED_RUNG,
        }
    }
    target.rungs = Some(rungs);
    target.meta.ladder = names[1..].to_vec();
    Ok(matrix)
}

//! Small descriptive-statistics helpers shared across modules.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Quantile with linear interpolation between order statistics at
/// position `(n - 1) p` (the usual "type 7" definition). `sorted` must be
/// ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let pos = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile by linear interpolation of the empirical CDF: position `n p`
/// in 1-based order statistics ("type 4"). On `1..=100` the 97.5th
/// percentile is exactly 97.5.
pub fn percentile_ecdf(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let pos = n as f64 * p.clamp(0.0, 1.0);
    if pos < 1.0 {
        return sorted[0];
    }
    let k = pos.floor() as usize;
    if k >= n {
        return sorted[n - 1];
    }
    let frac = pos - k as f64;
    sorted[k - 1] + frac * (sorted[k] - sorted[k - 1])
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Pearson correlation over the rows where both inputs are finite.
/// Returns `None` when fewer than two pairs exist or either side is constant.
pub fn pearson_pairwise(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut n, mut sa, mut sb) = (0usize, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        if x.is_finite() && y.is_finite() {
            n += 1;
            sa += x;
            sb += y;
        }
    }
    if n < 2 {
        return None;
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        if x.is_finite() && y.is_finite() {
            let (dx, dy) = (x - ma, y - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// One row of a descriptive summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl SummaryRow {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let s = sorted_copy(xs);
        Some(SummaryRow {
            n: s.len(),
            mean: mean(&s),
            sd: sample_sd(&s),
            min: s[0],
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_percentile_on_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_ecdf(&xs, 0.975), 97.5);
        assert_eq!(percentile_ecdf(&xs, 1.0), 100.0);
        assert_eq!(percentile_ecdf(&xs, 0.001), 1.0);
    }

    #[test]
    fn type7_quartiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 2.5);
        assert_eq!(quantile_sorted(&xs, 0.25), 1.75);
    }

    #[test]
    fn pearson_of_duplicate_is_one() {
        let a = [1.0, 2.0, 4.0, f64::NAN, 7.0];
        let r = pearson_pairwise(&a, &a).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!(pearson_pairwise(&a, &[3.0; 5]).is_none());
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fitted::Dispersion;
use super::forecast::{running_sum, ForecastSeries};
use super::gbt::{fit_gbt, GbtModel, GbtParams, Loss};
use super::tweedie::draw_tweedie;
use crate::error::{Error, Result};
use crate::features::{Column, ColumnKind, FeatureMatrix, Level, RowKey};
use crate::stats::quantile_sorted;
use crate::trialdata::{milestone_targets, Milestone};

pub const MIN_SIMS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    MonteCarlo,
    QuantileGbt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntervalConfig {
    pub method: IntervalMethod,
    pub n_sims: usize,
    /// Nominal central coverage of each band.
    pub levels: Vec<f64>,
    /// Multiplier on the fitted dispersion.
    pub dispersion_scale: f64,
    pub seed: u64,
    pub quantile_gbt: GbtParams,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        IntervalConfig {
            method: IntervalMethod::MonteCarlo,
            n_sims: 1000,
            levels: vec![0.5, 0.8, 0.95],
            dispersion_scale: 1.0,
            seed: 0,
            quantile_gbt: GbtParams {
                n_rounds: 200,
                max_depth: 3,
                min_samples_leaf: 20,
                ..GbtParams::default()
            },
        }
    }
}

impl IntervalConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Error::Config {
            key: format!("intervals.{k}"),
            message: m,
        };
        if self.n_sims < MIN_SIMS {
            return Err(err(
                "n_sims",
                format!("{} is below the minimum of {MIN_SIMS}", self.n_sims),
            ));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(err("levels", "each level must be in (0,1)".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err("levels", "levels must be strictly increasing".into()));
        }
        if !(self.dispersion_scale >= 0.0 && self.dispersion_scale.is_finite()) {
            return Err(err(
                "dispersion_scale",
                "must be a finite value >= 0".into(),
            ));
        }
        self.quantile_gbt.validate("intervals.quantile_gbt")
    }
}

/// Central band on the cumulative study count, per study month.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Quantiles of the 1-based study month at which a milestone is reached;
/// `None` means the quantile lies beyond the forecast horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MilestoneBand {
    pub milestone: Milestone,
    pub level: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBands {
    pub study_id: String,
    pub mean: Vec<f64>,
    pub bands: Vec<Band>,
    pub milestones: Vec<MilestoneBand>,
}

impl IntervalBands {
    pub fn band(&self, level: f64) -> Option<&Band> {
        self.bands.iter().find(|b| (b.level - level).abs() < 1e-12)
    }
}

fn study_seed(seed: u64, study_id: &str) -> u64 {
    // FNV-1a keeps streams independent of cohort order.
    let h = study_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    seed ^ h
}

fn simulate_cumulative(series: &ForecastSeries, p: f64, phi: f64, seed: u64, sim: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sim);
    let mut monthly = vec![0.0; series.months()];
    for s in &series.sites {
        for (m, &mu) in s.monthly.iter().enumerate() {
            monthly[s.offset + m] += if phi > 0.0 {
                draw_tweedie(&mut rng, mu, phi, p)
            } else {
                mu
            };
        }
    }
    running_sum(&monthly)
}

fn quantile_with_inf(sorted: &[f64], q: f64) -> Option<f64> {
    let v = quantile_sorted(sorted, q);
    v.is_finite().then_some(v)
}

fn band_quantiles(level: f64) -> (f64, f64) {
    ((1.0 - level) / 2.0, (1.0 + level) / 2.0)
}

/// Monte-Carlo bands from compound Poisson-gamma draws around every site
/// month mean. Each trajectory has its own random stream.
pub fn prediction_intervals(
    series: &ForecastSeries,
    dispersion: Dispersion,
    cfg: &IntervalConfig,
) -> Result<IntervalBands> {
    cfg.validate()?;
    let phi = dispersion.phi * cfg.dispersion_scale;
    if !(dispersion.p > 1.0 && dispersion.p < 2.0) || !phi.is_finite() {
        return Err(Error::InvalidParam(format!(
            "bad dispersion {dispersion:?}"
        )));
    }
    let seed = study_seed(cfg.seed, &series.study_id);
    let sims: Vec<Vec<f64>> = (0..cfg.n_sims as u64)
        .into_par_iter()
        .map(|k| simulate_cumulative(series, dispersion.p, phi, seed, k))
        .collect();
    let months = series.months();
    let mut per_month: Vec<Vec<f64>> = (0..months)
        .map(|m| {
            let mut v: Vec<f64> = sims.iter().map(|s| s[m]).collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let bands = cfg
        .levels
        .iter()
        .map(|&level| {
            let (lo, hi) = band_quantiles(level);
            Band {
                level,
                lower: per_month.iter().map(|v| quantile_sorted(v, lo)).collect(),
                upper: per_month.iter().map(|v| quantile_sorted(v, hi)).collect(),
            }
        })
        .collect();
    per_month.clear();

    let targets = milestone_targets(series.target);
    let mut milestones = Vec::new();
    for (mi, m) in Milestone::ALL.into_iter().enumerate() {
        let mut reach: Vec<f64> = sims
            .iter()
            .map(|s| {
                s.iter()
                    .position(|c| *c >= targets[mi] as f64)
                    .map_or(f64::INFINITY, |i| (i + 1) as f64)
            })
            .collect();
        reach.sort_by(f64::total_cmp);
        for &level in &cfg.levels {
            let (lo, hi) = band_quantiles(level);
            milestones.push(MilestoneBand {
                milestone: m,
                level,
                lower: quantile_with_inf(&reach, lo),
                upper: quantile_with_inf(&reach, hi),
            });
        }
    }
    Ok(IntervalBands {
        study_id: series.study_id.clone(),
        mean: series.cumulative.clone(),
        bands,
        milestones,
    })
}

const QB_FEATURES: [&str; 3] = ["pred_cum_mean", "study_month", "n_sites"];

fn quantile_design(series: &[&ForecastSeries]) -> Result<FeatureMatrix> {
    let mut keys = Vec::new();
    let mut cols: [Vec<f64>; 3] = Default::default();
    for (i, s) in series.iter().enumerate() {
        for (m, c) in s.cumulative.iter().enumerate() {
            keys.push(RowKey {
                study_id: s.study_id.clone(),
                facility_id: i.to_string(),
                month_index: m as u32,
            });
            cols[0].push(*c);
            cols[1].push((m + 1) as f64);
            cols[2].push(s.sites.len() as f64);
        }
    }
    let columns = QB_FEATURES
        .iter()
        .zip(cols)
        .map(|(n, v)| Column::numeric(*n, Level::SiteMonth, ColumnKind::Numeric, v))
        .collect();
    FeatureMatrix::new(keys, columns)
}

/// Direct quantile regression of the observed cumulative count on the
/// forecast mean, one pinball-loss model per band edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBandModel {
    pub levels: Vec<f64>,
    pub lower: Vec<GbtModel>,
    pub upper: Vec<GbtModel>,
}

/// `observed[i]` is the realised cumulative count of `series[i]` by study
/// month; months past its end repeat the final total.
pub fn fit_quantile_bands(
    series: &[ForecastSeries],
    observed: &[Vec<f64>],
    cfg: &IntervalConfig,
) -> Result<QuantileBandModel> {
    cfg.validate()?;
    if series.len() != observed.len() || series.is_empty() {
        return Err(Error::InvalidParam(
            "need one observed series per forecast".into(),
        ));
    }
    let refs: Vec<&ForecastSeries> = series.iter().collect();
    let x = quantile_design(&refs)?;
    let mut y = Vec::with_capacity(x.n_rows());
    for (s, obs) in series.iter().zip(observed) {
        let last = obs.last().copied().unwrap_or(0.0);
        y.extend((0..s.months()).map(|m| obs.get(m).copied().unwrap_or(last)));
    }
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for &level in &cfg.levels {
        let (lo, hi) = band_quantiles(level);
        lower.push(fit_gbt(
            &x,
            &rows,
            &y,
            Loss::Pinball { tau: lo },
            &cfg.quantile_gbt,
        )?);
        upper.push(fit_gbt(
            &x,
            &rows,
            &y,
            Loss::Pinball { tau: hi },
            &cfg.quantile_gbt,
        )?);
    }
    Ok(QuantileBandModel {
        levels: cfg.levels.clone(),
        lower,
        upper,
    })
}

impl QuantileBandModel {
    /// Bands are made non-negative, non-decreasing in time and nested across
    /// levels.
    pub fn predict(&self, series: &ForecastSeries) -> Result<IntervalBands> {
        let x = quantile_design(&[series])?;
        let mut bands: Vec<Band> = Vec::with_capacity(self.levels.len());
        for ((&level, lo), hi) in self.levels.iter().zip(&self.lower).zip(&self.upper) {
            let mut l = lo.predict(&x)?;
            let mut u = hi.predict(&x)?;
            for (a, b) in l.iter_mut().zip(u.iter_mut()) {
                if *a > *b {
                    std::mem::swap(a, b);
                }
                *a = a.max(0.0);
                *b = b.max(0.0);
            }
            monotone(&mut l);
            monotone(&mut u);
            if let Some(inner) = bands.last() {
                for m in 0..l.len() {
                    l[m] = l[m].min(inner.lower[m]);
                    u[m] = u[m].max(inner.upper[m]);
                }
            }
            bands.push(Band {
                level,
                lower: l,
                upper: u,
            });
        }
        Ok(IntervalBands {
            study_id: series.study_id.clone(),
            mean: series.cumulative.clone(),
            bands,
            milestones: Vec::new(),
        })
    }
}

fn monotone(xs: &mut [f64]) {
    for i in 1..xs.len() {
        if xs[i] < xs[i - 1] {
            xs[i] = xs[i - 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::YearMonth;
    use crate::models::forecast::testutil::*;
    use crate::models::forecast::{forecast_study, ForecastMode};
    use crate::trialdata::testutil::study;

    fn series() -> ForecastSeries {
        let specs: Vec<SiteSpec> = (0..4)
            .map(|i| SiteSpec {
                study: "S",
                facility: ["a", "b", "c", "d"][i],
                country: "US",
                creation: YearMonth::new(2020, 1 + i as u32),
                months: 12,
                rate: 0.5 + i as f64 * 0.25,
            })
            .collect();
        let (x, model) = rate_fixture(&specs);
        forecast_study(
            &model,
            &x,
            &study("S", "2019-06-01"),
            &plans(&specs, "S"),
            ForecastMode::Evaluation,
        )
        .unwrap()
    }

    const DISP: Dispersion = Dispersion { p: 1.5, phi: 1.2 };

    #[test]
    fn too_few_simulations_are_rejected() {
        let cfg = IntervalConfig {
            n_sims: 99,
            ..IntervalConfig::default()
        };
        match prediction_intervals(&series(), DISP, &cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "intervals.n_sims"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bands_nest_and_bracket_the_mean() {
        let s = series();
        let b = prediction_intervals(&s, DISP, &IntervalConfig::default()).unwrap();
        for w in b.bands.windows(2) {
            for m in 0..s.months() {
                assert!(w[1].lower[m] <= w[0].lower[m] && w[0].upper[m] <= w[1].upper[m]);
            }
        }
        let outer = b.bands.last().unwrap();
        for m in 0..s.months() {
            assert!(outer.lower[m] <= s.cumulative[m] && s.cumulative[m] <= outer.upper[m]);
            if m > 0 {
                assert!(outer.upper[m] >= outer.upper[m - 1] - 1e-9);
            }
        }
    }

    #[test]
    fn simulated_totals_match_the_forecast_mean() {
        let s = series();
        let cfg = IntervalConfig {
            n_sims: 4000,
            levels: vec![0.5],
            ..IntervalConfig::default()
        };
        let seed = study_seed(cfg.seed, &s.study_id);
        let totals: Vec<f64> = (0..cfg.n_sims as u64)
            .map(|k| {
                *simulate_cumulative(&s, DISP.p, DISP.phi, seed, k)
                    .last()
                    .unwrap()
            })
            .collect();
        let m = crate::stats::mean(&totals);
        let sd = crate::stats::sample_sd(&totals);
        assert!(
            (m - s.total()).abs() < 4.0 * sd / (cfg.n_sims as f64).sqrt(),
            "{m} vs {}",
            s.total()
        );
        let var: f64 = s
            .sites
            .iter()
            .flat_map(|x| x.monthly.iter())
            .map(|mu| DISP.phi * mu.powf(DISP.p))
            .sum();
        assert!((sd * sd / var - 1.0).abs() < 0.1, "{} vs {var}", sd * sd);
    }

    #[test]
    fn zero_dispersion_collapses_to_the_mean() {
        let s = series();
        for scale in [0.0, 1e-9] {
            let cfg = IntervalConfig {
                dispersion_scale: scale,
                ..IntervalConfig::default()
            };
            let b = prediction_intervals(&s, DISP, &cfg).unwrap();
            for band in &b.bands {
                for m in 0..s.months() {
                    assert!(
                        (band.lower[m] - s.cumulative[m]).abs() < 1e-3 * s.cumulative[m].max(1.0)
                    );
                    assert!(
                        (band.upper[m] - s.cumulative[m]).abs() < 1e-3 * s.cumulative[m].max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn results_are_reproducible() {
        let s = series();
        let cfg = IntervalConfig::default();
        let a = prediction_intervals(&s, DISP, &cfg).unwrap();
        let b = prediction_intervals(&s, DISP, &cfg).unwrap();
        assert_eq!(a, b);
        let c = prediction_intervals(&s, DISP, &IntervalConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.bands, c.bands);
    }

    #[test]
    fn milestone_quantiles_are_ordered() {
        let s = ForecastSeries {
            target: 40,
            ..series()
        };
        let b = prediction_intervals(&s, DISP, &IntervalConfig::default()).unwrap();
        let half: Vec<&MilestoneBand> = b
            .milestones
            .iter()
            .filter(|m| m.milestone == Milestone::Half)
            .collect();
        assert_eq!(half.len(), 3);
        for m in &half {
            let (lo, hi) = (m.lower.unwrap(), m.upper.unwrap());
            assert!(1.0 <= lo && lo <= hi && hi <= s.months() as f64);
        }
        assert!(half[2].lower <= half[0].lower && half[0].upper <= half[2].upper);
    }

    #[test]
    fn quantile_gbt_bands_nest() {
        let s = series();
        let mut observed = Vec::new();
        let mut train = Vec::new();
        for k in 0..60u64 {
            observed.push(simulate_cumulative(&s, DISP.p, DISP.phi, 77, k));
            train.push(s.clone());
        }
        let cfg = IntervalConfig {
            method: IntervalMethod::QuantileGbt,
            quantile_gbt: GbtParams {
                n_rounds: 50,
                ..IntervalConfig::default().quantile_gbt
            },
            ..IntervalConfig::default()
        };
        let qb = fit_quantile_bands(&train, &observed, &cfg).unwrap();
        let b = qb.predict(&s).unwrap();
        for w in b.bands.windows(2) {
            for m in 0..s.months() {
                assert!(w[1].lower[m] <= w[0].lower[m] && w[0].upper[m] <= w[1].upper[m]);
            }
        }
        let last = s.months() - 1;
        let wide = b.band(0.95).unwrap();
        assert!(wide.lower[last] < s.total() && s.total() < wide.upper[last]);
    }
}

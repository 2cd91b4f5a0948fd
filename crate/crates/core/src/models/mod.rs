//! Count distributions, the boosted-tree engine, zero-inflated and hurdle
//! regressions, baselines, forecasting and prediction intervals.

pub mod dist;
pub mod gbt;
pub mod tweedie;

pub use dist::{count_logpmf, tail_bound, CountFamily, CountParams};
pub use gbt::{fit_gbt, GbtModel, GbtParams, Loss, Node, Tree};
pub use tweedie::{
    draw_tweedie, pearson_dispersion, simulate_tweedie, tweedie_deviance, tweedie_grad_hess,
    tweedie_loss,
};
pub mod glm;
pub use glm::{
    fit_hurdle, fit_zip, GlmDiagnostics, GlmFamily, GlmModel, HurdleCount, RegressionParams,
};
pub mod fitted;
pub use fitted::{
    fit_baseline_hist_rate, panel_targets, site_groups, site_level_view, train_model, Dispersion,
    FittedModel, HistRateModel, ModelBody, ModelConfig, ModelKind,
};
pub mod forecast;
pub use forecast::{
    forecast_study, running_sum, ForecastMode, ForecastSeries, SiteForecast, SitePlan,
    DEFAULT_PLANNING_CAP,
};
pub mod intervals;
pub use intervals::{
    fit_quantile_bands, prediction_intervals, Band, IntervalBands, IntervalConfig, IntervalMethod,
    MilestoneBand, QuantileBandModel, MIN_SIMS,
};

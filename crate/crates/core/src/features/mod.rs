//! Design-matrix construction: leakage-safe historical features, time
//! features, hierarchical imputation and the fitted preprocessing pipeline.

mod assemble;
mod history;
mod impute;
mod matrix;
mod preprocess;

pub use assemble::{assemble_design_matrix, compute_time_features, FeatureConfig, TimeFeatures};
pub use history::{
    compute_group_history_feature, compute_prevalence_features, GroupVar, GroupingSpec,
    HistoryIndex, Metric, SiteHistory,
};
pub use impute::{hierarchical_impute, ImputationLadder, EXHAUSTED_RUNG};
pub use matrix::{
    is_missing, Column, ColumnKind, ColumnMeta, FeatureMatrix, Level, RowKey, MISSING,
};
pub use preprocess::{
    fit_preprocess, Consumer, GlmPrep, PrepParams, PreprocessConfig, OTHER_LEVEL,
};

/// Names of the per-row time features.
pub mod time_columns {
    pub const MONTH_INDEX: &str = "month_index";
    pub const CALENDAR_MONTH: &str = "calendar_month";
    pub const DAYS_IN_MONTH: &str = "days_in_month";
}

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::gbt::{fit_gbt, GbtModel, GbtParams, Loss};
use super::glm::{fit_hurdle, fit_zip, GlmModel, RegressionParams};
use super::tweedie::pearson_dispersion;
use crate::error::{Error, Result};
use crate::features::{
    fit_preprocess, is_missing, time_columns, Consumer, FeatureMatrix, Level, PrepParams,
    PreprocessConfig,
};
use crate::trialdata::SiteMonthPanel;

pub const MODEL_FORMAT: &str = "enrollcast-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Mean historical site rate walked down the imputation ladder.
    HistRate,
    /// Tweedie boosting on site-level enrollment rates.
    SiteRateGbt,
    /// Tweedie boosting on site-month counts.
    GbtTweedie,
    Zip,
    Hurdle,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::HistRate,
        ModelKind::SiteRateGbt,
        ModelKind::GbtTweedie,
        ModelKind::Zip,
        ModelKind::Hurdle,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::HistRate => "hist_rate",
            ModelKind::SiteRateGbt => "site_rate_gbt",
            ModelKind::GbtTweedie => "gbt_tweedie",
            ModelKind::Zip => "zip",
            ModelKind::Hurdle => "hurdle",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| format!("unknown model {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: ModelKind,
    pub tweedie_p: f64,
    pub seed: u64,
    pub gbt: GbtParams,
    /// Hyperparameters of the site-rate boosting baseline.
    pub site_rate_gbt: GbtParams,
    pub regression: RegressionParams,
    /// Columns walked by the historical-rate baseline, most specific first.
    pub baseline_ladder: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: ModelKind::GbtTweedie,
            tweedie_p: 1.5,
            seed: 0,
            gbt: GbtParams::default(),
            site_rate_gbt: GbtParams {
                n_rounds: 300,
                max_depth: 4,
                min_samples_leaf: 10,
                ..GbtParams::default()
            },
            regression: RegressionParams::default(),
            baseline_ladder: [
                "rate__facility_indication",
                "rate__country_indication",
                "rate__indication",
                "rate__indication_group",
                "rate__therapeutic_area",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tweedie_p > 1.0 && self.tweedie_p < 2.0) {
            return Err(Error::Config {
                key: "model.tweedie_p".into(),
                message: format!("{} is outside the valid interval (1,2)", self.tweedie_p),
            });
        }
        self.gbt.validate("model.gbt")?;
        self.site_rate_gbt.validate("model.site_rate_gbt")?;
        let r = &self.regression;
        if !(r.tol > 0.0) {
            return Err(Error::Config {
                key: "model.regression.tol".into(),
                message: "must be > 0".into(),
            });
        }
        if !(r.ridge >= 0.0 && r.separation_ridge > 0.0) {
            return Err(Error::Config {
                key: "model.regression.ridge".into(),
                message: "ridge must be >= 0 and separation_ridge > 0".into(),
            });
        }
        if self.baseline_ladder.is_empty() {
            return Err(Error::Config {
                key: "model.baseline_ladder".into(),
                message: "needs at least one column".into(),
            });
        }
        Ok(())
    }
}

/// Tweedie variance law used for simulation: Var = phi * mu^p.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub p: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRateModel {
    pub ladder: Vec<String>,
    pub global_rate: f64,
}

impl HistRateModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let cols = self
            .ladder
            .iter()
            .map(|n| x.require(n).map(|c| &c.values))
            .collect::<Result<Vec<_>>>()?;
        let mut exhausted = 0usize;
        let out = (0..x.n_rows())
            .map(|i| {
                cols.iter()
                    .map(|c| c[i])
                    .find(|v| !is_missing(*v))
                    .unwrap_or_else(|| {
                        exhausted += 1;
                        self.global_rate
                    })
            })
            .collect();
        if exhausted > 0 {
            log::debug!("{exhausted} rows fell back to the global mean rate");
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelBody {
    HistRate(HistRateModel),
    Gbt { prep: PrepParams, gbt: GbtModel },
    Glm { prep: PrepParams, glm: GlmModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    /// Schema hash of the raw feature matrix the model was trained on.
    pub schema_hash: String,
    pub dispersion: Dispersion,
    pub body: ModelBody,
}

/// Groups row indices by (study, facility) in order of first appearance.
pub fn site_groups(x: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut index: std::collections::HashMap<(&str, &str), usize> =
        std::collections::HashMap::new();
    for &r in rows {
        let k = &x.keys()[r];
        let g = *index
            .entry((&k.study_id, &k.facility_id))
            .or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
        out[g].push(r);
    }
    out
}

/// The matrix without its site-month columns.
pub fn site_level_view(x: &FeatureMatrix) -> FeatureMatrix {
    let (keys, cols) = x.clone().into_parts();
    let cols = cols
        .into_iter()
        .filter(|c| c.meta.level != Level::SiteMonth)
        .collect();
    FeatureMatrix::new(keys, cols).expect("subset of a valid matrix")
}

/// Observed counts aligned to the rows of `x`.
pub fn panel_targets(x: &FeatureMatrix, panel: &SiteMonthPanel) -> Result<Vec<f64>> {
    let counts: std::collections::HashMap<(&str, &str, u32), u32> = panel
        .rows()
        .iter()
        .map(|r| {
            (
                (r.study_id.as_str(), r.facility_id.as_str(), r.month_index),
                r.enrolled_count,
            )
        })
        .collect();
    x.keys()
        .iter()
        .map(|k| {
            counts
                .get(&(k.study_id.as_str(), k.facility_id.as_str(), k.month_index))
                .map(|&c| c as f64)
                .ok_or_else(|| {
                    Error::KeyMismatch(format!(
                        "{}/{}/{} not in panel",
                        k.study_id, k.facility_id, k.month_index
                    ))
                })
        })
        .collect()
}

fn exposure_offset(x: &FeatureMatrix) -> Result<Vec<f64>> {
    let d = x.require(time_columns::DAYS_IN_MONTH)?;
    Ok(d.values.iter().map(|v| (v / 30.4375).ln()).collect())
}

pub fn fit_baseline_hist_rate(
    x: &FeatureMatrix,
    targets: &[f64],
    train_rows: &[usize],
    ladder: &[String],
) -> Result<HistRateModel> {
    for c in ladder {
        x.require(c)?;
    }
    let rates: Vec<f64> = site_groups(x, train_rows)
        .iter()
        .map(|g| g.iter().map(|&r| targets[r]).sum::<f64>() / g.len() as f64)
        .collect();
    if rates.is_empty() {
        return Err(Error::InvalidParam("no training sites".into()));
    }
    Ok(HistRateModel {
        ladder: ladder.to_vec(),
        global_rate: crate::stats::mean(&rates),
    })
}

/// Trains `kind` on `train_rows` of the raw feature matrix; `targets` holds
/// the observed count of every matrix row.
pub fn train_model(
    kind: ModelKind,
    x: &FeatureMatrix,
    targets: &[f64],
    train_rows: &[usize],
    cfg: &ModelConfig,
    prep_cfg: &PreprocessConfig,
) -> Result<FittedModel> {
    if targets.len() != x.n_rows() {
        return Err(Error::KeyMismatch(format!(
            "{} targets for {} feature rows",
            targets.len(),
            x.n_rows()
        )));
    }
    let y: Vec<f64> = train_rows.iter().map(|&r| targets[r]).collect();
    let p = cfg.tweedie_p;
    let body = match kind {
        ModelKind::HistRate => ModelBody::HistRate(fit_baseline_hist_rate(
            x,
            targets,
            train_rows,
            &cfg.baseline_ladder,
        )?),
        ModelKind::SiteRateGbt => {
            let view = site_level_view(x);
            let groups = site_groups(x, train_rows);
            let first: Vec<usize> = groups.iter().map(|g| g[0]).collect();
            let rates: Vec<f64> = groups
                .iter()
                .map(|g| g.iter().map(|&r| targets[r]).sum::<f64>() / g.len() as f64)
                .collect();
            let (prep, xp) = fit_preprocess(&view, &first, prep_cfg, Consumer::Tree)?;
            let params = GbtParams {
                seed: cfg.seed,
                ..cfg.site_rate_gbt.clone()
            };
            let gbt = fit_gbt(&xp, &first, &rates, Loss::Tweedie { p }, &params)?;
            ModelBody::Gbt { prep, gbt }
        }
        ModelKind::GbtTweedie => {
            let (prep, xp) = fit_preprocess(x, train_rows, prep_cfg, Consumer::Tree)?;
            let params = GbtParams {
                seed: cfg.seed,
                ..cfg.gbt.clone()
            };
            let gbt = fit_gbt(&xp, train_rows, &y, Loss::Tweedie { p }, &params)?;
            ModelBody::Gbt { prep, gbt }
        }
        ModelKind::Zip | ModelKind::Hurdle => {
            let (prep, xp) = fit_preprocess(x, train_rows, prep_cfg, Consumer::Glm)?;
            let offset = if cfg.regression.exposure_offset {
                let o = exposure_offset(x)?;
                Some(train_rows.iter().map(|&r| o[r]).collect::<Vec<_>>())
            } else {
                None
            };
            let glm = if kind == ModelKind::Zip {
                fit_zip(&xp, train_rows, &y, offset.as_deref(), &cfg.regression)?
            } else {
                fit_hurdle(&xp, train_rows, &y, offset.as_deref(), &cfg.regression)?
            };
            ModelBody::Glm { prep, glm }
        }
    };
    let mut model = FittedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        kind,
        schema_hash: x.schema_hash(),
        dispersion: Dispersion { p, phi: 1.0 },
        body,
    };
    let train_x = x.select_rows(train_rows);
    let mu = model.predict(&train_x)?;
    model.dispersion.phi = pearson_dispersion(&y, &mu, p, 0);
    if !model.dispersion.phi.is_finite() || model.dispersion.phi <= 0.0 {
        return Err(Error::Numeric(format!(
            "dispersion estimate {}",
            model.dispersion.phi
        )));
    }
    Ok(model)
}

impl FittedModel {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let found = x.schema_hash();
        if found != self.schema_hash {
            return Err(Error::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found,
            });
        }
        let out = match &self.body {
            ModelBody::HistRate(m) => m.predict(x)?,
            ModelBody::Gbt { prep, gbt } => {
                let input = if self.kind == ModelKind::SiteRateGbt {
                    prep.apply(&site_level_view(x))?
                } else {
                    prep.apply(x)?
                };
                gbt.predict(&input)?
            }
            ModelBody::Glm { prep, glm } => {
                let offset = if glm.exposure_offset {
                    Some(exposure_offset(x)?)
                } else {
                    None
                };
                glm.predict_mean(&prep.apply(x)?, offset.as_deref())?
            }
        };
        if let Some(v) = out.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numeric(format!("invalid prediction {v}")));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: FittedModel = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::Serde(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{assemble_design_matrix, FeatureConfig};
    use crate::syncohort::{generate_cohort, GeneratorConfig};
    use crate::trialdata::build_site_month_panel;

    fn fixture() -> (FeatureMatrix, Vec<f64>) {
        let (cohort, _) = generate_cohort(&GeneratorConfig {
            n_studies: 40,
            rng_seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let panel = build_site_month_panel(&cohort).unwrap();
        let x = assemble_design_matrix(&cohort, &panel, &FeatureConfig::default()).unwrap();
        let y = panel_targets(&x, &panel).unwrap();
        (x, y)
    }

    fn quick() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.gbt.n_rounds = 20;
        cfg.site_rate_gbt.n_rounds = 20;
        cfg.regression.max_iter = 30;
        cfg
    }

    #[test]
    fn every_family_trains_and_roundtrips() {
        let (x, y) = fixture();
        let rows: Vec<usize> = (0..x.n_rows()).collect();
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            let m =
                train_model(kind, &x, &y, &rows, &quick(), &PreprocessConfig::default()).unwrap();
            assert!(m.dispersion.phi > 0.0, "{kind}");
            let pred = m.predict(&x).unwrap();
            assert_eq!(pred.len(), x.n_rows());
            let path = dir.path().join(format!("{kind}.json"));
            m.save(&path).unwrap();
            let back = FittedModel::load(&path).unwrap();
            assert_eq!(back.predict(&x).unwrap(), pred, "{kind}");
        }
    }

    #[test]
    fn site_level_models_are_constant_within_a_site() {
        let (x, y) = fixture();
        let rows: Vec<usize> = (0..x.n_rows()).collect();
        for kind in [ModelKind::HistRate, ModelKind::SiteRateGbt] {
            let m =
                train_model(kind, &x, &y, &rows, &quick(), &PreprocessConfig::default()).unwrap();
            let pred = m.predict(&x).unwrap();
            for g in site_groups(&x, &rows) {
                assert!(g.iter().all(|&r| pred[r] == pred[g[0]]), "{kind}");
            }
        }
    }

    #[test]
    fn hist_rate_falls_back_to_global_mean() {
        let (x, y) = fixture();
        let rows: Vec<usize> = (0..x.n_rows()).collect();
        let m = fit_baseline_hist_rate(&x, &y, &rows, &["rate__facility_indication".to_string()])
            .unwrap();
        let pred = m.predict(&x).unwrap();
        let col = &x.column("rate__facility_indication").unwrap().values;
        for (p, v) in pred.iter().zip(col) {
            assert_eq!(*p, if is_missing(*v) { m.global_rate } else { *v });
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let (x, y) = fixture();
        let rows: Vec<usize> = (0..x.n_rows()).collect();
        let m = train_model(
            ModelKind::HistRate,
            &x,
            &y,
            &rows,
            &quick(),
            &PreprocessConfig::default(),
        )
        .unwrap();
        let (keys, mut cols) = x.clone().into_parts();
        cols.pop();
        let fewer = FeatureMatrix::new(keys, cols).unwrap();
        assert!(matches!(
            m.predict(&fewer),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn config_range_errors_name_the_key() {
        let cfg = ModelConfig {
            tweedie_p: 2.0,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.tweedie_p"),
            other => panic!("{other:?}"),
        }
        assert_eq!("zip".parse::<ModelKind>().unwrap(), ModelKind::Zip);
        assert!("glm".parse::<ModelKind>().is_err());
    }
}

//! The command pipeline: every command reads the run configuration, writes
//! its artifacts and records a manifest of input and output hashes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PredictMode, RunConfig};
use crate::error::{Error, Result};
use crate::evalharness::{
    calibration_report, make_random_split, run_evaluation, write_calibration_csv, SplitPlan,
};
use crate::features::{assemble_design_matrix, fit_preprocess, Consumer, FeatureMatrix};
use crate::models::{
    fit_quantile_bands, forecast_study, panel_targets, prediction_intervals, train_model,
    FittedModel, ForecastMode, ForecastSeries, IntervalBands, IntervalMethod, ModelBody, ModelKind,
    SitePlan,
};
use crate::syncohort::write_generated;
use crate::trialdata::{
    apply_cohort_filters, build_site_month_panel, load_cohort_with, write_exclusions, Cohort,
    SiteMonthPanel,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const STUDIES: &str = "studies.csv";
pub const SITES: &str = "sites.csv";
pub const EVENTS: &str = "events.csv";
pub const TRUTH: &str = "truth.csv";
pub const EXCLUSIONS: &str = "exclusions.csv";
pub const FEATURES: &str = "features.csv";
pub const FEATURE_SCHEMA: &str = "features_schema.csv";
pub const PREP_PARAMS: &str = "prep_params.csv";
pub const MODEL: &str = "model.json";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const FORECAST: &str = "forecast.csv";
pub const STUDY_FORECAST: &str = "study_forecast.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const BANDS: &str = "bands.csv";
pub const MILESTONE_BANDS: &str = "milestone_bands.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Prepare,
    Train,
    Predict,
    Evaluate,
    Intervals,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Gen,
        Command::Prepare,
        Command::Train,
        Command::Predict,
        Command::Evaluate,
        Command::Intervals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Intervals => "intervals",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// A command invocation: the configuration plus the directory relative
/// paths are resolved against.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub base: PathBuf,
    data: PathBuf,
    work: PathBuf,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, base: &Path) -> Self {
        let p = cfg.paths.resolve(base);
        Run {
            cfg,
            base: base.to_path_buf(),
            data: p.data_dir,
            work: p.work_dir,
            out: p.out_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: PathBuf) -> Result<PathBuf> {
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn output(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(name);
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.base)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<Vec<FileHash>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: self.display(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    }

    fn finish(self, command: Command, dir: &Path) -> Result<Manifest> {
        let manifest = Manifest {
            command: command.name().into(),
            version: VERSION.into(),
            config: self.cfg.echo()?,
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(&self.outputs)?,
        };
        let path = dir.join(format!("manifest_{}.json", command.name()));
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    fn cohort(&mut self) -> Result<Cohort> {
        let s = self.input(self.data.join(STUDIES))?;
        let t = self.input(self.data.join(SITES))?;
        let e = self.input(self.data.join(EVENTS))?;
        let raw = load_cohort_with(&s, &t, &e, self.cfg.integrity())?;
        let cohort = apply_cohort_filters(&raw, &self.cfg.filters);
        if cohort.studies().is_empty() {
            return Err(Error::EmptyCohort);
        }
        Ok(cohort)
    }

    fn features(&mut self) -> Result<FeatureMatrix> {
        let f = self.input(self.work.join(FEATURES))?;
        let s = self.input(self.work.join(FEATURE_SCHEMA))?;
        FeatureMatrix::read_csv(&f, &s)
    }

    fn model(&mut self) -> Result<FittedModel> {
        let p = self.input(self.work.join(MODEL))?;
        FittedModel::load(&p)
    }

    /// Cohort, panel, features and the observed count of every feature row.
    fn dataset(&mut self) -> Result<(Cohort, SiteMonthPanel, FeatureMatrix, Vec<f64>)> {
        let cohort = self.cohort()?;
        let panel = build_site_month_panel(&cohort)?;
        let x = self.features()?;
        let y = panel_targets(&x, &panel)?;
        Ok((cohort, panel, x, y))
    }

    fn split(&self, cohort: &Cohort) -> Result<SplitPlan> {
        let ids: Vec<String> = cohort
            .studies()
            .iter()
            .map(|s| s.study_id.clone())
            .collect();
        make_random_split(
            &ids,
            self.cfg.eval.holdout_fraction,
            self.cfg.eval.k_folds,
            self.cfg.eval.seed,
        )
    }
}

/// Runs one command with relative paths taken from `base`.
pub fn run(command: Command, cfg: &RunConfig, base: &Path) -> Result<Manifest> {
    let mut run = Run::new(cfg, base);
    log::info!("{command}: starting");
    let dir = match command {
        Command::Gen => gen(&mut run)?,
        Command::Prepare => prepare(&mut run)?,
        Command::Train => train(&mut run)?,
        Command::Predict => predict(&mut run)?,
        Command::Evaluate => evaluate(&mut run)?,
        Command::Intervals => intervals(&mut run)?,
    };
    let m = run.finish(command, &dir)?;
    log::info!("{command}: wrote {} artifacts", m.outputs.len());
    Ok(m)
}

fn gen(run: &mut Run) -> Result<PathBuf> {
    let dir = run.data.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_generated(&run.cfg.generator, &dir)?;
    for name in [STUDIES, SITES, EVENTS, TRUTH] {
        run.output(&dir, name)?;
    }
    Ok(dir)
}

fn prepare(run: &mut Run) -> Result<PathBuf> {
    let cohort = run.cohort()?;
    let dir = run.work.clone();
    let excl = run.output(&dir, EXCLUSIONS)?;
    write_exclusions(cohort.exclusion_log(), &excl)?;
    let panel = build_site_month_panel(&cohort)?;
    let x = assemble_design_matrix(&cohort, &panel, &run.cfg.features)?;
    let f = run.output(&dir, FEATURES)?;
    let s = run.output(&dir, FEATURE_SCHEMA)?;
    x.write_csv(&f, &s)?;
    let consumer = match run.cfg.model.family {
        ModelKind::Zip | ModelKind::Hurdle => Consumer::Glm,
        _ => Consumer::Tree,
    };
    let train = training_rows(run, &cohort, &x)?;
    let (prep, _) = fit_preprocess(&x, &train, &run.cfg.features.preprocess, consumer)?;
    let p = run.output(&dir, PREP_PARAMS)?;
    prep.write_csv(&p)?;
    log::info!(
        "{} studies, {} feature rows, {} columns",
        cohort.studies().len(),
        x.n_rows(),
        x.n_cols()
    );
    Ok(dir)
}

/// Rows of the discovery studies; the holdout is kept for calibration.
fn training_rows(run: &Run, cohort: &Cohort, x: &FeatureMatrix) -> Result<Vec<usize>> {
    let plan = run.split(cohort)?;
    let discovery: HashSet<&str> = plan.discovery().into_iter().collect();
    Ok(x.rows_where(|s| discovery.contains(s)))
}

fn train(run: &mut Run) -> Result<PathBuf> {
    let (cohort, _, x, y) = run.dataset()?;
    let rows = training_rows(run, &cohort, &x)?;
    let model = train_model(
        run.cfg.model.family,
        &x,
        &y,
        &rows,
        &run.cfg.model,
        &run.cfg.features.preprocess,
    )?;
    let dir = run.work.clone();
    let p = run.output(&dir, MODEL)?;
    model.save(&p)?;
    let log_path = run.output(&dir, TRAIN_LOG)?;
    let mut log = format!(
        "family {}\ntraining rows {}\nschema {}\ntweedie p {}\ndispersion {}\n",
        model.kind,
        rows.len(),
        model.schema_hash,
        model.dispersion.p,
        model.dispersion.phi
    );
    match &model.body {
        ModelBody::HistRate(m) => log.push_str(&format!("global rate {}\n", m.global_rate)),
        ModelBody::Gbt { gbt, .. } => log.push_str(&format!(
            "trees {}\nbase score {}\n",
            gbt.trees.len(),
            gbt.base_score
        )),
        ModelBody::Glm { glm, .. } => {
            let d = &glm.diagnostics;
            log.push_str(&format!(
                "log likelihood {}\niterations {}\nconverged {}\nridge fallback {}\npoisson fallback {}\n",
                d.log_likelihood, d.iterations, d.converged, d.ridge_fallback, d.poisson_fallback
            ));
        }
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(dir)
}

fn site_plans(panel: &SiteMonthPanel, study: &str) -> Vec<SitePlan> {
    panel.spans_of(study).map(SitePlan::from).collect()
}

/// Forecasts every study that has feature rows, over its panel sites.
pub fn forecast_all(
    model: &FittedModel,
    cohort: &Cohort,
    panel: &SiteMonthPanel,
    x: &FeatureMatrix,
    mode: ForecastMode,
) -> Result<Vec<ForecastSeries>> {
    let with_rows: HashSet<&str> = x.keys().iter().map(|k| k.study_id.as_str()).collect();
    cohort
        .studies()
        .iter()
        .filter(|s| with_rows.contains(s.study_id.as_str()))
        .map(|s| forecast_study(model, x, s, &site_plans(panel, &s.study_id), mode))
        .collect()
}

fn predict(run: &mut Run) -> Result<PathBuf> {
    let (cohort, panel, x, _) = run.dataset()?;
    let model = run.model()?;
    let mode = match run.cfg.predict.mode {
        PredictMode::Evaluation => ForecastMode::Evaluation,
        PredictMode::Planning => ForecastMode::Planning {
            cap_months: run.cfg.predict.cap_months,
        },
    };
    let series = forecast_all(&model, &cohort, &panel, &x, mode)?;
    let dir = run.out.clone();
    let p = run.output(&dir, FORECAST)?;
    let mut text = String::from("study_id,facility_id,month_index,pred_mean\n");
    for s in &series {
        for site in &s.sites {
            for (m, v) in site.monthly.iter().enumerate() {
                text.push_str(&format!("{},{},{m},{v}\n", s.study_id, site.facility_id));
            }
        }
    }
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    let p = run.output(&dir, STUDY_FORECAST)?;
    let mut text = String::from(
        "study_id,study_month,calendar_month,pred_monthly,pred_cumulative,milestone,capped\n",
    );
    for s in &series {
        let ms = s.milestone_months(s.target);
        for (m, (v, c)) in s.study_monthly.iter().zip(&s.cumulative).enumerate() {
            let month = m + 1;
            let hit: Vec<&str> = crate::trialdata::Milestone::ALL
                .iter()
                .zip(ms)
                .filter(|(_, at)| *at == Some(month))
                .map(|(l, _)| l.label())
                .collect();
            text.push_str(&format!(
                "{},{month},{},{v},{c},{},{}\n",
                s.study_id,
                s.calendar_month(month),
                hit.join(";"),
                s.capped
            ));
        }
    }
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

fn evaluate(run: &mut Run) -> Result<PathBuf> {
    let (cohort, panel, x, y) = run.dataset()?;
    let out = run_evaluation(
        &cohort,
        &panel,
        &x,
        &y,
        &run.cfg.eval,
        &run.cfg.model,
        &run.cfg.features.preprocess,
    )?;
    let dir = run.out.clone();
    for p in out.write(&dir)? {
        run.outputs.push(p);
    }
    Ok(dir)
}

/// Observed cumulative study enrollment by study month.
/// Realised cumulative enrollment aligned with the months of `s`.
pub fn observed_cumulative(panel: &SiteMonthPanel, s: &ForecastSeries) -> Vec<f64> {
    let mut monthly = vec![0.0; s.months()];
    for span in panel.spans_of(&s.study_id) {
        let offset = span.creation.months_since(s.start) as usize;
        for r in panel.site_rows(span) {
            let m = offset + r.month_index as usize;
            if m < monthly.len() {
                monthly[m] += r.enrolled_count as f64;
            }
        }
    }
    crate::models::running_sum(&monthly)
}

fn intervals(run: &mut Run) -> Result<PathBuf> {
    let (cohort, panel, x, _) = run.dataset()?;
    let model = run.model()?;
    let plan = run.split(&cohort)?;
    let series = forecast_all(&model, &cohort, &panel, &x, ForecastMode::Evaluation)?;
    let holdout = plan.holdout();
    let (fit, score): (Vec<&ForecastSeries>, Vec<&ForecastSeries>) = series
        .iter()
        .partition(|s| !holdout.contains(s.study_id.as_str()));
    // Without a holdout every study is scored.
    let score = if score.is_empty() { fit.clone() } else { score };
    let cfg = &run.cfg.intervals;
    let bands: Vec<IntervalBands> = match cfg.method {
        IntervalMethod::MonteCarlo => score
            .iter()
            .map(|s| prediction_intervals(s, model.dispersion, cfg))
            .collect::<Result<_>>()?,
        IntervalMethod::QuantileGbt => {
            let train: Vec<ForecastSeries> = fit.iter().map(|s| (*s).clone()).collect();
            let observed: Vec<Vec<f64>> =
                fit.iter().map(|s| observed_cumulative(&panel, s)).collect();
            let qb = fit_quantile_bands(&train, &observed, cfg)?;
            score.iter().map(|s| qb.predict(s)).collect::<Result<_>>()?
        }
    };
    let actual: Vec<f64> = score
        .iter()
        .map(|s| {
            observed_cumulative(&panel, s)
                .last()
                .copied()
                .unwrap_or(0.0)
        })
        .collect();
    let dir = run.out.clone();
    let coverage = calibration_report(model.kind.tag(), &bands, &actual)?;
    let p = run.output(&dir, CALIBRATION)?;
    write_calibration_csv(&p, &coverage)?;

    let p = run.output(&dir, BANDS)?;
    let mut text = String::from("study_id,study_month,level,mean,lower,upper\n");
    for b in &bands {
        for band in &b.bands {
            for m in 0..b.mean.len() {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    b.study_id,
                    m + 1,
                    band.level,
                    b.mean[m],
                    band.lower[m],
                    band.upper[m]
                ));
            }
        }
    }
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;

    let p = run.output(&dir, MILESTONE_BANDS)?;
    let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines: BTreeMap<(String, &str, u64), String> = BTreeMap::new();
    for b in &bands {
        for m in &b.milestones {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            lines.insert(
                (b.study_id.clone(), m.milestone.label(), m.level.to_bits()),
                format!(
                    "{},{},{},{},{}\n",
                    b.study_id,
                    m.milestone.label(),
                    m.level,
                    opt(m.lower),
                    opt(m.upper)
                ),
            );
        }
    }
    let mut text = String::from("study_id,milestone,level,lower_month,upper_month\n");
    text.extend(lines.into_values());
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

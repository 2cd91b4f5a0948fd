use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::{is_missing, Column, ColumnKind, FeatureMatrix, Level};
use crate::error::{Error, Result};
use crate::stats::{mean, pearson_pairwise, percentile_ecdf, quantile_sorted, sample_sd};

pub const OTHER_LEVEL: &str = "__OTHER__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Percentile (0-100) at which historical features are capped.
    pub winsor_percentile: f64,
    pub corr_threshold: f64,
    /// Levels seen in fewer distinct training studies are pooled.
    pub min_category_studies: usize,
    /// GLM inputs whose most common value exceeds this share are dropped.
    pub max_identical_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            winsor_percentile: 97.5,
            corr_threshold: 0.9,
            min_category_studies: 50,
            max_identical_fraction: 0.99,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let err = |k: &str, m: &str| Error::Config {
            key: format!("{prefix}.{k}"),
            message: m.into(),
        };
        if !(self.winsor_percentile > 0.0 && self.winsor_percentile <= 100.0) {
            return Err(err("winsor_percentile", "must be in (0, 100]"));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold <= 1.0) {
            return Err(err("corr_threshold", "must be in (0, 1]"));
        }
        if !(self.max_identical_fraction > 0.0 && self.max_identical_fraction <= 1.0) {
            return Err(err("max_identical_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consumer {
    /// Trees route missing values and split on category codes.
    Tree,
    /// Regressions need a complete, standardized numeric design.
    Glm,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlmPrep {
    /// Encoded levels per categorical column; the first pooled level is the
    /// reference and has no indicator.
    pub onehot: Vec<(String, Vec<String>)>,
    pub dropped_identical: Vec<String>,
    pub dropped_constant: Vec<String>,
    /// (column, mean, sd)
    pub scaling: Vec<(String, f64, f64)>,
    pub medians: Vec<(String, f64)>,
}

/// Everything fitted on training rows, replayable on any matrix with the
/// same input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepParams {
    pub consumer: Consumer,
    pub input_columns: Vec<String>,
    pub winsor: Vec<(String, f64)>,
    pub dropped_correlated: Vec<String>,
    /// Output dictionary per categorical column, ending with the pool level.
    pub categories: Vec<(String, Vec<String>)>,
    pub glm: Option<GlmPrep>,
}

fn train_values(c: &Column, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| c.values[i]).collect()
}

fn present(xs: &[f64]) -> Vec<f64> {
    xs.iter().copied().filter(|v| !is_missing(*v)).collect()
}

fn drop_columns(m: FeatureMatrix, names: &[String]) -> FeatureMatrix {
    if names.is_empty() {
        return m;
    }
    let drop: HashSet<&str> = names.iter().map(String::as_str).collect();
    let (keys, cols) = m.into_parts();
    let cols = cols
        .into_iter()
        .filter(|c| !drop.contains(c.name.as_str()))
        .collect();
    FeatureMatrix::new(keys, cols).expect("subset of a valid matrix")
}

fn lookup<'m>(m: &'m mut FeatureMatrix, name: &str) -> Result<&'m mut Column> {
    let j = m
        .column_index(name)
        .ok_or_else(|| Error::UnknownColumn(name.to_string()))?;
    Ok(&mut m.columns_mut()[j])
}

fn apply_winsor(mut m: FeatureMatrix, caps: &[(String, f64)]) -> Result<FeatureMatrix> {
    for (name, cap) in caps {
        for v in lookup(&mut m, name)?.values.iter_mut() {
            if *v > *cap {
                *v = *cap;
            }
        }
    }
    Ok(m)
}

fn apply_categories(mut m: FeatureMatrix, cats: &[(String, Vec<String>)]) -> Result<FeatureMatrix> {
    for (name, levels) in cats {
        let c = lookup(&mut m, name)?;
        let pos: HashMap<&str, usize> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let other = (levels.len() - 1) as f64;
        let old = std::mem::take(&mut c.levels);
        for v in c.values.iter_mut() {
            if !is_missing(*v) {
                *v = pos
                    .get(old[*v as usize].as_str())
                    .map_or(other, |&p| p as f64);
            }
        }
        c.levels = levels.clone();
    }
    Ok(m)
}

fn apply_onehot(m: FeatureMatrix, onehot: &[(String, Vec<String>)]) -> Result<FeatureMatrix> {
    let spec: HashMap<&str, &Vec<String>> = onehot.iter().map(|(c, l)| (c.as_str(), l)).collect();
    for (c, _) in onehot {
        m.column(c).ok_or_else(|| Error::UnknownColumn(c.clone()))?;
    }
    let (keys, cols) = m.into_parts();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        if !c.is_categorical() {
            out.push(c);
            continue;
        }
        let Some(levels) = spec.get(c.name.as_str()) else {
            continue;
        };
        for level in levels.iter() {
            let code = c.levels.iter().position(|l| l == level);
            let values = c
                .values
                .iter()
                .map(|&v| {
                    if !is_missing(v) && Some(v as usize) == code {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            out.push(Column::numeric(
                format!("{}={}", c.name, level),
                c.meta.level,
                ColumnKind::Numeric,
                values,
            ));
        }
    }
    FeatureMatrix::new(keys, out)
}

fn apply_scaling(mut m: FeatureMatrix, scaling: &[(String, f64, f64)]) -> Result<FeatureMatrix> {
    for (name, mu, sd) in scaling {
        for v in lookup(&mut m, name)?.values.iter_mut() {
            if !is_missing(*v) {
                *v = (*v - mu) / sd;
            }
        }
    }
    Ok(m)
}

fn apply_medians(mut m: FeatureMatrix, medians: &[(String, f64)]) -> Result<FeatureMatrix> {
    for (name, med) in medians {
        for v in lookup(&mut m, name)?.values.iter_mut() {
            if is_missing(*v) {
                *v = *med;
            }
        }
    }
    Ok(m)
}

impl PrepParams {
    fn check_inputs(&self, m: &FeatureMatrix) -> Result<()> {
        for c in &self.input_columns {
            m.column(c).ok_or_else(|| Error::UnknownColumn(c.clone()))?;
        }
        Ok(())
    }

    /// Replays the fitted transformation.
    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_inputs(m)?;
        let keep: HashSet<&str> = self.input_columns.iter().map(String::as_str).collect();
        let extra: Vec<String> = m
            .column_names()
            .into_iter()
            .filter(|c| !keep.contains(c))
            .map(String::from)
            .collect();
        let m = drop_columns(m.clone(), &extra);
        let m = apply_winsor(m, &self.winsor)?;
        let m = drop_columns(m, &self.dropped_correlated);
        let mut m = apply_categories(m, &self.categories)?;
        if let Some(g) = &self.glm {
            m = apply_onehot(m, &g.onehot)?;
            m = drop_columns(m, &g.dropped_identical);
            m = drop_columns(m, &g.dropped_constant);
            m = apply_scaling(m, &g.scaling)?;
            m = apply_medians(m, &g.medians)?;
        }
        Ok(m)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        let mut rows: Vec<[String; 4]> = Vec::new();
        let mut row = |step: &str, col: &str, key: &str, val: String| {
            rows.push([step.into(), col.into(), key.into(), val]);
        };
        let consumer = match self.consumer {
            Consumer::Tree => "tree",
            Consumer::Glm => "glm",
        };
        row("consumer", "", "", consumer.into());
        for c in &self.input_columns {
            row("input", c, "", String::new());
        }
        for (c, v) in &self.winsor {
            row("winsor", c, "", v.to_string());
        }
        for c in &self.dropped_correlated {
            row("drop_correlated", c, "", String::new());
        }
        for (c, levels) in &self.categories {
            for l in levels {
                row("category", c, l, String::new());
            }
        }
        if let Some(g) = &self.glm {
            for (c, levels) in &g.onehot {
                row("onehot", c, "", String::new());
                for l in levels {
                    row("onehot_level", c, l, String::new());
                }
            }
            for c in &g.dropped_identical {
                row("drop_identical", c, "", String::new());
            }
            for c in &g.dropped_constant {
                row("drop_constant", c, "", String::new());
            }
            for (c, mu, sd) in &g.scaling {
                row("scale_mean", c, "", mu.to_string());
                row("scale_sd", c, "", sd.to_string());
            }
            for (c, v) in &g.medians {
                row("median", c, "", v.to_string());
            }
        }
        let csv_err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["step", "column", "key", "value"])
            .map_err(csv_err)?;
        for r in rows {
            w.write_record(&r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<PrepParams> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(f);
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut p = PrepParams {
            consumer: Consumer::Tree,
            input_columns: Vec::new(),
            winsor: Vec::new(),
            dropped_correlated: Vec::new(),
            categories: Vec::new(),
            glm: None,
        };
        let mut pending_sd: HashMap<String, f64> = HashMap::new();
        for (i, rec) in r.records().enumerate() {
            let row = i + 2;
            let bad = |message: String| Error::Csv {
                file: file.clone(),
                row,
                message,
            };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let (step, col, key, val) = (&rec[0], rec[1].to_string(), rec[2].to_string(), &rec[3]);
            let num = || {
                val.parse::<f64>()
                    .map_err(|_| bad(format!("bad number {val:?}")))
            };
            let push_level = |list: &mut Vec<(String, Vec<String>)>| match list.last_mut() {
                Some((c, levels)) if *c == col => levels.push(key.clone()),
                _ => list.push((col.clone(), vec![key.clone()])),
            };
            match step {
                "consumer" => {
                    p.consumer = match val {
                        "tree" => Consumer::Tree,
                        "glm" => {
                            p.glm = Some(GlmPrep::default());
                            Consumer::Glm
                        }
                        o => return Err(bad(format!("unknown consumer {o:?}"))),
                    }
                }
                "input" => p.input_columns.push(col),
                "winsor" => p.winsor.push((col, num()?)),
                "drop_correlated" => p.dropped_correlated.push(col),
                "category" => push_level(&mut p.categories),
                _ => {
                    let g = p
                        .glm
                        .as_mut()
                        .ok_or_else(|| bad(format!("{step} outside a glm block")))?;
                    match step {
                        "onehot" => g.onehot.push((col, Vec::new())),
                        "onehot_level" => push_level(&mut g.onehot),
                        "drop_identical" => g.dropped_identical.push(col),
                        "drop_constant" => g.dropped_constant.push(col),
                        "scale_mean" => g.scaling.push((col, num()?, f64::NAN)),
                        "scale_sd" => {
                            pending_sd.insert(col, num()?);
                        }
                        "median" => g.medians.push((col, num()?)),
                        o => return Err(bad(format!("unknown step {o:?}"))),
                    }
                }
            }
        }
        if let Some(g) = p.glm.as_mut() {
            for (c, _, sd) in g.scaling.iter_mut() {
                *sd = pending_sd
                    .remove(c)
                    .ok_or_else(|| Error::Serde(format!("{file}: no sd for {c}")))?;
            }
        }
        Ok(p)
    }
}

/// Fits preprocessing on `train_rows` and returns the parameters together
/// with the transformed full matrix.
pub fn fit_preprocess(
    matrix: &FeatureMatrix,
    train_rows: &[usize],
    cfg: &PreprocessConfig,
    consumer: Consumer,
) -> Result<(PrepParams, FeatureMatrix)> {
    if train_rows.is_empty() {
        return Err(Error::InvalidParam("no training rows".into()));
    }
    let mut params = PrepParams {
        consumer,
        input_columns: matrix
            .column_names()
            .into_iter()
            .map(String::from)
            .collect(),
        winsor: Vec::new(),
        dropped_correlated: Vec::new(),
        categories: Vec::new(),
        glm: None,
    };

    for c in matrix.columns() {
        if c.meta.kind == ColumnKind::Historical {
            let sorted = crate::stats::sorted_copy(&present(&train_values(c, train_rows)));
            if !sorted.is_empty() {
                params.winsor.push((
                    c.name.clone(),
                    percentile_ecdf(&sorted, cfg.winsor_percentile / 100.0),
                ));
            }
        }
    }
    let m = apply_winsor(matrix.clone(), &params.winsor)?;

    let candidates: Vec<(&Column, Vec<f64>)> = m
        .columns()
        .iter()
        .filter(|c| !c.is_categorical())
        .map(|c| (c, train_values(c, train_rows)))
        .collect();
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..candidates.len() {
        let (cj, xj) = &candidates[j];
        let correlated = cj.meta.level != Level::SiteMonth
            && kept.iter().any(|&i| {
                pearson_pairwise(&candidates[i].1, xj).is_some_and(|r| r.abs() > cfg.corr_threshold)
            });
        if correlated {
            params.dropped_correlated.push(cj.name.clone());
        } else {
            kept.push(j);
        }
    }
    let m = drop_columns(m, &params.dropped_correlated);

    for c in m.columns().iter().filter(|c| c.is_categorical()) {
        let mut studies: Vec<HashSet<&str>> = vec![HashSet::new(); c.levels.len()];
        for &i in train_rows {
            if !is_missing(c.values[i]) {
                studies[c.values[i] as usize].insert(&m.keys()[i].study_id);
            }
        }
        let mut levels: Vec<String> = c
            .levels
            .iter()
            .zip(&studies)
            .filter(|(l, s)| s.len() >= cfg.min_category_studies && l.as_str() != OTHER_LEVEL)
            .map(|(l, _)| l.clone())
            .collect();
        levels.push(OTHER_LEVEL.to_string());
        params.categories.push((c.name.clone(), levels));
    }
    let mut m = apply_categories(m, &params.categories)?;

    if consumer == Consumer::Glm {
        let mut g = GlmPrep::default();
        for c in m.columns().iter().filter(|c| c.is_categorical()) {
            g.onehot.push((c.name.clone(), c.levels[1..].to_vec()));
        }
        m = apply_onehot(m, &g.onehot)?;

        for c in m.columns() {
            if c.meta.level == Level::SiteMonth {
                continue;
            }
            let mut freq: HashMap<u64, usize> = HashMap::new();
            for &i in train_rows {
                let v = c.values[i];
                *freq
                    .entry(if is_missing(v) { u64::MAX } else { v.to_bits() })
                    .or_default() += 1;
            }
            let top = freq.values().copied().max().unwrap_or(0);
            if top as f64 > cfg.max_identical_fraction * train_rows.len() as f64 {
                g.dropped_identical.push(c.name.clone());
            }
        }
        m = drop_columns(m, &g.dropped_identical);

        for c in m.columns() {
            let xs = present(&train_values(c, train_rows));
            let sd = if xs.len() >= 2 { sample_sd(&xs) } else { 0.0 };
            if !(sd > 0.0 && sd.is_finite()) {
                log::warn!("dropping zero-variance column {}", c.name);
                g.dropped_constant.push(c.name.clone());
            } else {
                g.scaling.push((c.name.clone(), mean(&xs), sd));
            }
        }
        m = drop_columns(m, &g.dropped_constant);
        m = apply_scaling(m, &g.scaling)?;

        for c in m.columns() {
            let sorted = crate::stats::sorted_copy(&present(&train_values(c, train_rows)));
            g.medians
                .push((c.name.clone(), quantile_sorted(&sorted, 0.5)));
        }
        m = apply_medians(m, &g.medians)?;
        params.glm = Some(g);
    }
    Ok((params, m))
}

use std::path::Path;

use super::metrics::{CoverageRow, MetricLevel, MetricsReport, MilestoneReport};
use super::RollingRow;
use crate::error::{Error, Result};
use crate::trialdata::Milestone;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish<W: std::io::Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn put<W: std::io::Write>(path: &Path, w: &mut csv::Writer<W>, rec: &[String]) -> Result<()> {
    w.write_record(rec)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    let mut w = writer(path)?;
    put(
        path,
        &mut w,
        &["model", "level", "mae", "mae_se", "mse", "mse_se", "n"].map(String::from),
    )?;
    for r in rows {
        put(
            path,
            &mut w,
            &[
                r.model.clone(),
                r.level.to_string(),
                r.mae.to_string(),
                r.mae_se.to_string(),
                r.mse.to_string(),
                r.mse_se.to_string(),
                r.n.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn write_milestones_csv(path: &Path, rows: &[MilestoneReport]) -> Result<()> {
    let mut w = writer(path)?;
    put(
        path,
        &mut w,
        &[
            "model",
            "milestone",
            "mae",
            "mae_se",
            "n",
            "skipped",
            "timing_mae",
            "timing_n",
        ]
        .map(String::from),
    )?;
    for r in rows {
        put(
            path,
            &mut w,
            &[
                r.model.clone(),
                r.milestone.label().to_string(),
                r.mae.to_string(),
                r.mae_se.to_string(),
                r.n.to_string(),
                r.skipped.to_string(),
                r.timing_mae.to_string(),
                r.timing_n.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn write_calibration_csv(path: &Path, rows: &[CoverageRow]) -> Result<()> {
    let mut w = writer(path)?;
    put(
        path,
        &mut w,
        &["model", "level", "coverage", "n"].map(String::from),
    )?;
    for r in rows {
        put(
            path,
            &mut w,
            &[
                r.model.clone(),
                r.level.to_string(),
                r.coverage.to_string(),
                r.n.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

pub fn write_rolling_csv(path: &Path, rows: &[RollingRow]) -> Result<()> {
    let mut w = writer(path)?;
    put(
        path,
        &mut w,
        &[
            "quarter", "model", "split", "n_train", "n_test", "mae", "mae_se", "mse", "mse_se",
        ]
        .map(String::from),
    )?;
    for r in rows {
        put(
            path,
            &mut w,
            &[
                r.quarter.to_string(),
                r.model.clone(),
                r.split.to_string(),
                r.n_train.to_string(),
                r.n_test.to_string(),
                r.metrics.mae.to_string(),
                r.metrics.mae_se.to_string(),
                r.metrics.mse.to_string(),
                r.metrics.mse_se.to_string(),
            ],
        )?;
    }
    finish(path, w)
}

const COLUMNS: [(&str, Option<MetricLevel>, bool); 9] = [
    ("Study MAE", Some(MetricLevel::Study), false),
    ("Study MSE", Some(MetricLevel::Study), true),
    ("Study-site MAE", Some(MetricLevel::StudySite), false),
    ("Study-site MSE", Some(MetricLevel::StudySite), true),
    ("Site-month MAE", Some(MetricLevel::StudySiteMonth), false),
    ("Site-month MSE", Some(MetricLevel::StudySiteMonth), true),
    ("50% PE MAE", None, false),
    ("90% PE MAE", None, false),
    ("Last PE MAE", None, false),
];

/// Markdown comparison table, one row per model, with every per-column
/// minimum in bold (ties included).
pub fn leaderboard(
    title: &str,
    metrics: &[MetricsReport],
    milestones: &[MilestoneReport],
) -> String {
    let mut models: Vec<&str> = Vec::new();
    for m in metrics
        .iter()
        .map(|r| r.model.as_str())
        .chain(milestones.iter().map(|r| r.model.as_str()))
    {
        if !models.contains(&m) {
            models.push(m);
        }
    }
    let cell = |model: &str, col: usize| -> Option<(f64, f64)> {
        let (_, level, mse) = COLUMNS[col];
        match level {
            Some(level) => metrics
                .iter()
                .find(|r| r.model == model && r.level == level)
                .map(|r| {
                    if mse {
                        (r.mse, r.mse_se)
                    } else {
                        (r.mae, r.mae_se)
                    }
                }),
            None => {
                let ms = Milestone::ALL[col - 6];
                milestones
                    .iter()
                    .find(|r| r.model == model && r.milestone == ms && r.n > 0)
                    .map(|r| (r.mae, r.mae_se))
            }
        }
    };
    let mut out = format!("## {title}\n\n| Model |");
    for (name, _, _) in COLUMNS {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(COLUMNS.len()));
    out.push('\n');
    let best: Vec<Option<f64>> = (0..COLUMNS.len())
        .map(|c| {
            models
                .iter()
                .filter_map(|m| cell(m, c))
                .map(|v| v.0)
                .min_by(f64::total_cmp)
        })
        .collect();
    for m in &models {
        out.push_str(&format!("| {m} |"));
        for (c, b) in best.iter().enumerate() {
            match cell(m, c) {
                Some((v, se)) if Some(v) == *b => out.push_str(&format!(" **{v:.3}** ({se:.3}) |")),
                Some((v, se)) => out.push_str(&format!(" {v:.3} ({se:.3}) |")),
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\nStandard errors in parentheses; bold marks the best value per column.\n");
    out
}

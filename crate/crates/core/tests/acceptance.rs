//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};

use enrollcast::calendar::{Quarter, YearMonth};
use enrollcast::config::RunConfig;
use enrollcast::evalharness::{
    compute_metrics, cross_validate, make_random_split, make_rolling_time_split, pooled_mae,
    rolling_evaluation, MetricLevel, SplitKind,
};
use enrollcast::features::{
    assemble_design_matrix, time_columns, Column, ColumnKind, FeatureConfig, FeatureMatrix, Level,
    PreprocessConfig, RowKey,
};
use enrollcast::models::dist::{tail_bound, CountFamily, CountParams};
use enrollcast::models::gbt::{fit_gbt, GbtParams, Loss, Node};
use enrollcast::models::glm::{fit_zip, GlmDiagnostics, GlmFamily, GlmModel, RegressionParams};
use enrollcast::models::tweedie::{tweedie_grad_hess, tweedie_loss};
use enrollcast::models::{
    forecast_study, panel_targets, prediction_intervals, train_model, Dispersion, FittedModel,
    ForecastMode, HistRateModel, IntervalConfig, ModelBody, ModelConfig, ModelKind, SitePlan,
};
use enrollcast::pipeline::{self, forecast_all, observed_cumulative, Command};
use enrollcast::syncohort::{generate_cohort, GeneratorConfig};
use enrollcast::trialdata::{
    apply_cohort_filters, build_site_month_panel, compute_milestones, first_reaching,
    milestone_targets, Cohort, EnrollmentEvent, FilterConfig, Gender, IntegrityConfig, Milestone,
    Phase, SiteMonthPanel, StudyRecord, StudySiteRecord,
};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn main() {
    let only: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria = [
        Criterion {
            id: 1,
            name: "distribution correctness",
            limit: secs(1),
            run: c1_distributions,
        },
        Criterion {
            id: 2,
            name: "tweedie gradient/hessian",
            limit: secs(1),
            run: c2_tweedie_derivatives,
        },
        Criterion {
            id: 3,
            name: "ZIP parameter recovery",
            limit: secs(30),
            run: c3_zip_recovery,
        },
        Criterion {
            id: 4,
            name: "hurdle truncated mean",
            limit: secs(1),
            run: c4_hurdle_mean,
        },
        Criterion {
            id: 5,
            name: "GBT split oracle",
            limit: secs(5),
            run: c5_gbt_split,
        },
        Criterion {
            id: 6,
            name: "ordering reproduction",
            limit: secs(15 * 60),
            run: c6_ordering,
        },
        Criterion {
            id: 7,
            name: "leakage",
            limit: secs(10),
            run: c7_leakage,
        },
        Criterion {
            id: 8,
            name: "forecast additivity and milestones",
            limit: secs(1),
            run: c8_additivity,
        },
        Criterion {
            id: 9,
            name: "interval calibration",
            limit: secs(10 * 60),
            run: c9_calibration,
        },
        Criterion {
            id: 10,
            name: "rolling time split",
            limit: secs(20 * 60),
            run: c10_rolling,
        },
        Criterion {
            id: 11,
            name: "end-to-end determinism",
            limit: Duration::MAX,
            run: c11_determinism,
        },
    ];
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
    {
        let t = Instant::now();
        let outcome = (c.run)();
        let took = t.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.limit => Err(format!("{d}; too slow")),
            o => o,
        };
        let limit = if c.limit == Duration::MAX {
            String::new()
        } else {
            format!(" < {:?}", c.limit)
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} [{}] {tag}: {detail} ({:.2?}{limit})",
            c.id, c.name, took
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn c1_distributions() -> Outcome {
    let families = [
        CountParams::poisson(0.05),
        CountParams::poisson(3.0),
        CountParams::poisson(40.0),
        CountParams::truncated_poisson(0.3),
        CountParams::truncated_poisson(7.5),
        CountParams::negative_binomial(2.0, 0.5),
        CountParams::negative_binomial(12.0, 4.0),
        CountParams::zip(0.3, 2.0),
        CountParams::zip(0.9, 15.0),
        CountParams::hurdle(0.5, 1.0, None),
        CountParams::hurdle(0.2, 6.0, Some(1.5)),
    ];
    let mut worst = 0.0f64;
    for p in &families {
        let k = tail_bound(p, 1e-10).map_err(e)?;
        let lo = u64::from(p.family == CountFamily::TruncatedPoisson);
        let mass: f64 = (lo..=k)
            .map(|i| p.pmf(i))
            .sum::<enrollcast::Result<f64>>()
            .map_err(e)?;
        ensure(mass >= 1.0 - 1e-9, || {
            format!("{p:?}: mass {mass} up to K={k}")
        })?;
        worst = worst.max(1.0 - mass);
    }
    let mut max_diff = 0.0f64;
    for lambda in [0.2, 1.0, 4.0, 17.5] {
        let zip = CountParams::zip(0.0, lambda);
        let poi = CountParams::poisson(lambda);
        for k in 0..=50 {
            max_diff = max_diff.max((zip.pmf(k).map_err(e)? - poi.pmf(k).map_err(e)?).abs());
        }
    }
    ensure(max_diff <= 1e-12, || {
        format!("ZIP(pi=0) vs Poisson differs by {max_diff:e}")
    })?;
    Ok(format!(
        "{} families, max missing mass {worst:.1e}, ZIP(0) vs Poisson {max_diff:.1e}",
        families.len()
    ))
}

fn c2_tweedie_derivatives() -> Outcome {
    let ys = [0.0, 0.5, 2.0, 5.0, 20.0];
    let fs = [-1.7, -0.6, 0.3, 1.1, 2.3];
    let ps = [1.1, 1.3, 1.5, 1.7, 1.9];
    let h = 1e-4;
    let mut worst = 0.0f64;
    for &y in &ys {
        for &f in &fs {
            for &p in &ps {
                let (g, hs) = tweedie_grad_hess(y, f, p);
                let g_fd = (tweedie_loss(y, f + h, p) - tweedie_loss(y, f - h, p)) / (2.0 * h);
                let h_fd = (tweedie_grad_hess(y, f + h, p).0 - tweedie_grad_hess(y, f - h, p).0)
                    / (2.0 * h);
                let rg = (g - g_fd).abs() / g_fd.abs();
                let rh = (hs - h_fd).abs() / h_fd.abs();
                ensure(rg < 1e-5 && rh < 1e-5, || {
                    format!("y={y} F={f} p={p}: grad rel err {rg:e}, hess rel err {rh:e}")
                })?;
                worst = worst.max(rg).max(rh);
            }
        }
    }
    Ok(format!("125 grid points, max rel err {worst:.1e}"))
}

fn intercept_matrix(n: usize) -> FeatureMatrix {
    let keys = (0..n)
        .map(|i| RowKey {
            study_id: format!("S{i}"),
            facility_id: "F".into(),
            month_index: 0,
        })
        .collect();
    FeatureMatrix::new(keys, vec![]).unwrap()
}

fn c3_zip_recovery() -> Outcome {
    let n = 20_000;
    let x = intercept_matrix(n);
    let rows: Vec<usize> = (0..n).collect();
    let (mut dpi, mut dlam) = (0.0f64, 0.0f64);
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let zero = Bernoulli::new(0.3).unwrap();
        let count = Poisson::new(2.0).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|_| {
                if zero.sample(&mut rng) {
                    0.0
                } else {
                    count.sample(&mut rng)
                }
            })
            .collect();
        let m = fit_zip(&x, &rows, &y, None, &RegressionParams::default()).map_err(e)?;
        let (pi, lam) = m.predict_params(&x, None).map_err(e)?[0];
        ensure(
            (pi - 0.3).abs() <= 0.03 && (lam - 2.0).abs() <= 0.06,
            || format!("seed {seed}: pi={pi:.4}, lambda={lam:.4}"),
        )?;
        dpi = dpi.max((pi - 0.3).abs());
        dlam = dlam.max((lam - 2.0).abs());
    }
    Ok(format!(
        "10 seeds, max |pi err| {dpi:.4}, max |lambda err| {dlam:.4}"
    ))
}

fn c4_hurdle_mean() -> Outcome {
    let expected = 0.790989;
    let x = intercept_matrix(1);
    let model = GlmModel {
        family: GlmFamily::Hurdle,
        hurdle_count: None,
        zero_features: vec![],
        count_features: vec![],
        // logit(0.5) = 0 and ln(1.0) = 0
        zero_coef: vec![0.0],
        count_coef: vec![0.0],
        r: None,
        exposure_offset: false,
        diagnostics: GlmDiagnostics::default(),
    };
    let from_model = model.predict_mean(&x, None).map_err(e)?[0];
    let from_dist = CountParams::hurdle(0.5, 1.0, None).mean();
    for (what, v) in [("regression", from_model), ("distribution", from_dist)] {
        ensure((v - expected).abs() <= 1e-6, || format!("{what} mean {v}"))?;
    }
    Ok(format!("mean {from_model:.7}"))
}

/// Exhaustive best root split for a Tweedie first tree; returns the winning
/// (feature, threshold, gain) and the best gain of any other split.
fn brute_force_split(
    cols: &[Vec<f64>],
    y: &[f64],
    p: f64,
    params: &GbtParams,
) -> Option<((usize, f64, f64), f64)> {
    let f0 = (y.iter().sum::<f64>() / y.len() as f64).ln();
    let gh: Vec<(f64, f64)> = y.iter().map(|&v| tweedie_grad_hess(v, f0, p)).collect();
    let (gt, ht): (f64, f64) = gh.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let score = |g: f64, h: f64| g * g / (h + params.lambda_l2);
    let mut all = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        let mut thresholds = col.clone();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        thresholds.pop();
        for t in thresholds {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            for (i, &v) in col.iter().enumerate() {
                if v <= t {
                    gl += gh[i].0;
                    hl += gh[i].1;
                    nl += 1;
                }
            }
            let nr = y.len() - nl;
            if nl < params.min_samples_leaf || nr < params.min_samples_leaf {
                continue;
            }
            let gain = 0.5 * (score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht));
            if gain > params.min_split_gain {
                all.push((j, t, gain));
            }
        }
    }
    let best = all
        .iter()
        .copied()
        .fold(None, |b: Option<(usize, f64, f64)>, c| match b {
            Some(b) if b.2 >= c.2 => Some(b),
            _ => Some(c),
        })?;
    let runner_up = all
        .iter()
        .filter(|c| (c.0, c.1) != (best.0, best.1))
        .map(|c| c.2)
        .fold(f64::NEG_INFINITY, f64::max);
    Some((best, runner_up))
}

fn c5_gbt_split() -> Outcome {
    let p = 1.5;
    let params = GbtParams {
        n_rounds: 1,
        max_depth: 1,
        min_samples_leaf: 3,
        ..GbtParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut checked = 0;
    for d in 0..20 {
        let n = rng.random_range(20..=100usize);
        let n_feat = rng.random_range(1..=4usize);
        let cols: Vec<Vec<f64>> = (0..n_feat)
            .map(|j| {
                (0..n)
                    .map(|_| {
                        // Mix of continuous and coarse columns to exercise ties.
                        if j % 2 == 0 {
                            rng.random_range(-5.0..5.0)
                        } else {
                            rng.random_range(0..6) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let mu = (0.5 * cols[0][i]).exp().min(20.0) + 0.2;
                Poisson::new(mu).unwrap().sample(&mut rng)
            })
            .collect();
        if y.iter().all(|&v| v == 0.0) {
            return Err(format!("dataset {d} has all-zero targets"));
        }
        let keys = (0..n)
            .map(|i| RowKey {
                study_id: format!("S{i}"),
                facility_id: "F".into(),
                month_index: 0,
            })
            .collect();
        let x = FeatureMatrix::new(
            keys,
            cols.iter()
                .enumerate()
                .map(|(j, c)| {
                    Column::numeric(
                        format!("x{j}"),
                        Level::Study,
                        ColumnKind::Numeric,
                        c.clone(),
                    )
                })
                .collect(),
        )
        .map_err(e)?;
        let rows: Vec<usize> = (0..n).collect();
        let model = fit_gbt(&x, &rows, &y, Loss::Tweedie { p }, &params).map_err(e)?;
        let got = model.root_split();
        match (got, brute_force_split(&cols, &y, p, &params)) {
            (None, None) => {}
            (Some((f, t, _)), Some((best, runner_up))) => {
                let gain = match &model.trees[0].nodes[0] {
                    Node::Split { gain, .. } => *gain,
                    Node::Leaf { .. } => unreachable!(),
                };
                let tie = (best.2 - runner_up).abs() <= 1e-10 * best.2.abs();
                ensure((f, t) == (best.0, best.1) || tie, || {
                    format!(
                        "dataset {d}: tree split x{f}<={t}, brute force x{}<={}",
                        best.0, best.1
                    )
                })?;
                ensure((gain - best.2).abs() <= 1e-9 * best.2.abs(), || {
                    format!("dataset {d}: gain {gain} vs brute force {}", best.2)
                })?;
            }
            (got, want) => return Err(format!("dataset {d}: tree {got:?}, brute force {want:?}")),
        }
        checked += 1;
    }
    Ok(format!("{checked} datasets agree"))
}

struct Prepared {
    cohort: Cohort,
    panel: SiteMonthPanel,
    x: FeatureMatrix,
    y: Vec<f64>,
}

fn prepare(gen: &GeneratorConfig) -> Result<Prepared, String> {
    let (raw, _) = generate_cohort(gen).map_err(e)?;
    let cohort = apply_cohort_filters(&raw, &FilterConfig::default());
    let panel = build_site_month_panel(&cohort).map_err(e)?;
    let x = assemble_design_matrix(&cohort, &panel, &FeatureConfig::default()).map_err(e)?;
    let y = panel_targets(&x, &panel).map_err(e)?;
    Ok(Prepared {
        cohort,
        panel,
        x,
        y,
    })
}

fn study_ids(c: &Cohort) -> Vec<String> {
    c.studies().iter().map(|s| s.study_id.clone()).collect()
}

fn c6_ordering() -> Outcome {
    let mut mcfg = ModelConfig::default();
    mcfg.gbt.n_rounds = 200;
    mcfg.regression.max_iter = 40;
    let prep_cfg = PreprocessConfig::default();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [1u64, 2, 3] {
        let d = prepare(&GeneratorConfig {
            n_studies: 320,
            rng_seed: seed,
            ..GeneratorConfig::default()
        })?;
        let n_studies = d.cohort.studies().len();
        ensure(n_studies >= 300, || {
            format!("seed {seed}: only {n_studies} studies")
        })?;
        let plan = make_random_split(&study_ids(&d.cohort), 0.0, 5, seed).map_err(e)?;
        let mut mae = BTreeMap::new();
        for kind in [ModelKind::HistRate, ModelKind::GbtTweedie, ModelKind::Zip] {
            let oof = cross_validate(kind, &d.x, &d.y, &plan, &mcfg, &prep_cfg).map_err(e)?;
            let r = compute_metrics(
                kind.tag(),
                &oof.keys(&d.x),
                &oof.pred,
                &d.panel,
                MetricLevel::Study,
            )
            .map_err(e)?;
            mae.insert(kind.tag(), r.mae);
        }
        let base = mae["hist_rate"];
        let rel = |k: &str| 1.0 - mae[k] / base;
        for k in ["gbt_tweedie", "zip"] {
            if rel(k) < 0.15 {
                failures.push(format!(
                    "seed {seed}: {k} improves on hist_rate by {:.1}%",
                    100.0 * rel(k)
                ));
            }
        }
        lines.push(format!(
            "seed {seed} ({n_studies} studies): hist {base:.2}, gbt {:.2} (-{:.0}%), zip {:.2} (-{:.0}%)",
            mae["gbt_tweedie"],
            100.0 * rel("gbt_tweedie"),
            mae["zip"],
            100.0 * rel("zip"),
        ));
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{}; {}", failures.join("; "), lines.join("; ")))
    }
}

fn rows_of(x: &FeatureMatrix, study: &str) -> BTreeMap<RowKey, Vec<u64>> {
    x.keys()
        .iter()
        .enumerate()
        .filter(|(_, k)| k.study_id == study)
        .map(|(i, k)| {
            (
                k.clone(),
                x.columns().iter().map(|c| c.values[i].to_bits()).collect(),
            )
        })
        .collect()
}

fn c7_leakage() -> Outcome {
    let (cohort, _) = generate_cohort(&GeneratorConfig {
        n_studies: 80,
        rng_seed: 7,
        ..GeneratorConfig::default()
    })
    .map_err(e)?;
    let cfg = FeatureConfig::default();
    let panel = build_site_month_panel(&cohort).map_err(e)?;
    let x = assemble_design_matrix(&cohort, &panel, &cfg).map_err(e)?;
    let mut studies: Vec<&StudyRecord> = cohort.studies().iter().collect();
    studies.sort_by_key(|s| s.ecrf_date);
    let n = studies.len();
    let focal: Vec<&StudyRecord> = [n / 4, n / 2, 3 * n / 4]
        .iter()
        .map(|&i| studies[i])
        .collect();
    let mut total_rows = 0;
    let mut mutated = 0;
    for f in focal {
        let cutoff = f.ecrf_date;
        let mut events: Vec<EnrollmentEvent> = Vec::new();
        let mut changed = 0;
        for ev in cohort.events() {
            if ev.enrollment_date <= cutoff {
                events.push(ev.clone());
                continue;
            }
            changed += 1;
            let mut dup = ev.clone();
            dup.patient_id = format!("{}-mut", ev.patient_id);
            if ev.study_id != f.study_id {
                // Other studies also see their later events pushed a month on.
                let mut moved = ev.clone();
                moved.enrollment_date = ev.enrollment_date + Days::new(31);
                events.push(moved);
            } else {
                events.push(ev.clone());
            }
            events.push(dup);
        }
        let mutated_cohort = cohort
            .with_events(events, IntegrityConfig::default())
            .map_err(e)?;
        let mpanel = build_site_month_panel(&mutated_cohort).map_err(e)?;
        let mx = assemble_design_matrix(&mutated_cohort, &mpanel, &cfg).map_err(e)?;
        ensure(x.column_names() == mx.column_names(), || {
            "schema changed".into()
        })?;
        let before = rows_of(&x, &f.study_id);
        let after = rows_of(&mx, &f.study_id);
        ensure(!before.is_empty() && before == after, || {
            let diff = before
                .iter()
                .find(|(k, v)| after.get(*k) != Some(*v))
                .map(|(k, _)| format!("{k:?}"))
                .unwrap_or_else(|| "row set".into());
            format!("study {} feature rows changed at {diff}", f.study_id)
        })?;
        total_rows += before.len();
        mutated += changed;
    }
    Ok(format!(
        "3 focal studies, {total_rows} rows bit-identical after mutating {mutated} later events"
    ))
}

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn hand_study(id: &str, ecrf: &str, target: u32) -> StudyRecord {
    StudyRecord {
        study_id: id.into(),
        ecrf_date: d(ecrf),
        therapeutic_area: Some("cardiology".into()),
        indication_group: "heart_failure".into(),
        indication: "hfref".into(),
        phase: Phase::III,
        sponsor_id: "sp".into(),
        cro_id: None,
        target_enrollment: target,
        num_arms: None,
        min_age: None,
        max_age: None,
        gender: Gender::All,
        study_type: "interventional".into(),
        extras: vec![],
    }
}

fn hand_site(study: &str, facility: &str, created: &str) -> StudySiteRecord {
    StudySiteRecord {
        study_id: study.into(),
        facility_id: facility.into(),
        country: "US".into(),
        creation_date: d(created),
        extras: vec![],
    }
}

/// Three studies; each site enrolls on the listed dates.
fn hand_cohort() -> Cohort {
    let studies = vec![
        hand_study("A", "2020-01-01", 6),
        hand_study("B", "2020-03-01", 4),
        hand_study("C", "2020-06-01", 5),
    ];
    let sites = vec![
        hand_site("A", "a1", "2020-01-10"),
        hand_site("A", "a2", "2020-03-05"),
        hand_site("B", "b1", "2020-03-01"),
        hand_site("C", "c1", "2020-06-02"),
        hand_site("C", "c2", "2020-06-20"),
        hand_site("C", "c3", "2020-08-01"),
    ];
    let plan: &[(&str, &str, &[&str])] = &[
        (
            "A",
            "a1",
            &["2020-01-15", "2020-02-03", "2020-02-20", "2020-04-01"],
        ),
        ("A", "a2", &["2020-03-10", "2020-04-11"]),
        (
            "B",
            "b1",
            &["2020-03-02", "2020-05-30", "2020-05-31", "2020-06-15"],
        ),
        ("C", "c1", &["2020-07-01"]),
        ("C", "c2", &["2020-06-25", "2020-08-08"]),
        ("C", "c3", &["2020-09-09", "2020-09-10"]),
    ];
    let mut events = Vec::new();
    for (study, fac, dates) in plan {
        for (i, day) in dates.iter().enumerate() {
            events.push(EnrollmentEvent {
                study_id: study.to_string(),
                facility_id: fac.to_string(),
                patient_id: format!("{fac}-{i}"),
                enrollment_date: d(day),
            });
        }
    }
    Cohort::new(studies, sites, events, IntegrityConfig::default()).unwrap()
}

fn c8_additivity() -> Outcome {
    let cohort = hand_cohort();
    let panel = build_site_month_panel(&cohort).map_err(e)?;
    let site_rate = |f: &str| match f {
        "a1" => 1.0,
        "a2" => 0.5,
        "b1" => 0.75,
        "c1" => 0.25,
        "c2" => 1.5,
        _ => 2.0,
    };
    let keys: Vec<RowKey> = panel
        .rows()
        .iter()
        .map(|r| RowKey {
            study_id: r.study_id.clone(),
            facility_id: r.facility_id.clone(),
            month_index: r.month_index,
        })
        .collect();
    let rate: Vec<f64> = panel
        .rows()
        .iter()
        .map(|r| site_rate(&r.facility_id))
        .collect();
    let cal: Vec<String> = panel
        .rows()
        .iter()
        .map(|r| format!("{:02}", r.calendar_month))
        .collect();
    let labels: Vec<Option<&str>> = cal.iter().map(|s| Some(s.as_str())).collect();
    let x = FeatureMatrix::new(
        keys,
        vec![
            Column::numeric("rate", Level::Site, ColumnKind::Historical, rate),
            Column::numeric(
                time_columns::MONTH_INDEX,
                Level::SiteMonth,
                ColumnKind::Numeric,
                panel.rows().iter().map(|r| r.month_index as f64).collect(),
            ),
            Column::categorical(time_columns::CALENDAR_MONTH, Level::SiteMonth, &labels),
            Column::numeric(
                time_columns::DAYS_IN_MONTH,
                Level::SiteMonth,
                ColumnKind::Numeric,
                panel
                    .rows()
                    .iter()
                    .map(|r| r.days_in_month as f64)
                    .collect(),
            ),
        ],
    )
    .map_err(e)?;
    let model = FittedModel {
        format: "enrollcast-model".into(),
        version: 1,
        kind: ModelKind::HistRate,
        schema_hash: x.schema_hash(),
        dispersion: Dispersion { p: 1.5, phi: 1.0 },
        body: ModelBody::HistRate(HistRateModel {
            ladder: vec!["rate".into()],
            global_rate: 0.0,
        }),
    };

    // Hand-computed expected study curves.
    let frozen: BTreeMap<&str, Vec<f64>> = BTreeMap::from([
        // a1 from Jan to Apr, a2 from Mar to Apr
        ("A", vec![1.0, 1.0, 1.5, 1.5]),
        // b1 from Mar to Jun
        ("B", vec![0.75, 0.75, 0.75, 0.75]),
        // c1, c2 from Jun, c3 from Aug, all to Sep
        ("C", vec![1.75, 1.75, 3.75, 3.75]),
    ]);
    let frozen_milestones: BTreeMap<&str, [Option<usize>; 3]> = BTreeMap::from([
        ("A", [Some(3), None, None]),
        ("B", [Some(3), None, None]),
        ("C", [Some(2), Some(3), Some(3)]),
    ]);
    let observed_milestones: BTreeMap<&str, [Option<usize>; 3]> = BTreeMap::from([
        ("A", [Some(2), Some(4), Some(4)]),
        ("B", [Some(3), Some(4), Some(4)]),
        ("C", [Some(3), Some(4), Some(4)]),
    ]);

    for s in cohort.studies() {
        let plans: Vec<SitePlan> = panel.spans_of(&s.study_id).map(SitePlan::from).collect();
        let fc = forecast_study(&model, &x, s, &plans, ForecastMode::Evaluation).map_err(e)?;
        let id = s.study_id.as_str();

        // Brute force: add each panel row's prediction into its calendar month.
        let start = plans.iter().map(|p| p.creation).min().unwrap();
        let mut brute = vec![0.0; fc.months()];
        for r in panel.rows().iter().filter(|r| r.study_id == s.study_id) {
            let m = r.year_month().months_since(start) as usize;
            if m >= brute.len() {
                brute.resize(m + 1, 0.0);
            }
            brute[m] += site_rate(&r.facility_id);
        }
        ensure(fc.study_monthly == brute, || {
            format!(
                "{id}: monthly {:?} vs brute force {brute:?}",
                fc.study_monthly
            )
        })?;
        ensure(fc.study_monthly == frozen[id], || {
            format!(
                "{id}: monthly {:?} vs hand value {:?}",
                fc.study_monthly, frozen[id]
            )
        })?;
        let site_total: f64 = fc.sites.iter().flat_map(|s| s.monthly.iter()).sum();
        ensure((fc.total() - site_total).abs() < 1e-12, || {
            format!("{id}: total {} vs site sum {site_total}", fc.total())
        })?;

        let targets = milestone_targets(s.target_enrollment);
        let scan = |monthly: &[f64]| -> [Option<usize>; 3] {
            targets.map(|t| {
                let mut acc = 0.0;
                monthly
                    .iter()
                    .position(|v| {
                        acc += v;
                        acc >= t as f64
                    })
                    .map(|i| i + 1)
            })
        };
        let got = fc.milestone_months(s.target_enrollment);
        ensure(got == scan(&brute) && got == frozen_milestones[id], || {
            format!(
                "{id}: milestones {got:?}, scan {:?}, hand {:?}",
                scan(&brute),
                frozen_milestones[id]
            )
        })?;

        // Realised milestones against the enrolled total, by counting events.
        let mut monthly_events = vec![0.0; fc.months()];
        for ev in cohort
            .events()
            .iter()
            .filter(|ev| ev.study_id == s.study_id)
        {
            let m = YearMonth::of(ev.enrollment_date).months_since(start) as usize;
            monthly_events[m] += 1.0;
        }
        let total = monthly_events.iter().sum::<f64>() as u32;
        let brute = milestone_targets(total).map(|t| {
            let mut acc = 0.0;
            monthly_events
                .iter()
                .position(|v| {
                    acc += v;
                    acc >= t as f64
                })
                .map(|i| i + 1)
        });
        let obs = observed_cumulative(&panel, &fc);
        let via_panel = milestone_targets(total)
            .map(|t| first_reaching(obs.iter().copied(), t as f64).map(|i| i + 1));
        let dates = compute_milestones(&cohort, id).map_err(e)?;
        let via_dates = [Milestone::Half, Milestone::Ninety, Milestone::Last]
            .map(|m| Some(dates.get(m).months_since(start) as usize + 1));
        ensure(
            brute == via_panel && brute == via_dates && brute == observed_milestones[id],
            || {
                format!(
                    "{id}: observed milestones brute {brute:?}, panel {via_panel:?}, dates {via_dates:?}"
                )
            },
        )?;
    }
    Ok("3 studies match brute-force sums, milestone scans and hand values".into())
}

/// Poisson generator whose monthly mean is a function of observed covariates.
fn matched_generator(seed: u64, n_studies: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_studies,
        zero_inflation: 0.0,
        site_rate_shape: 1e6,
        facility_effect_shape: 0.0,
        stop_at_target: false,
        rng_seed: seed,
        ..GeneratorConfig::default()
    }
}

fn c9_calibration() -> Outcome {
    let train = prepare(&matched_generator(91, 300))?;
    let test = prepare(&matched_generator(92, 300))?;
    let mut mcfg = ModelConfig::default();
    mcfg.tweedie_p = 1.1;
    mcfg.regression.max_iter = 40;
    let prep_cfg = PreprocessConfig {
        min_category_studies: 10,
        ..PreprocessConfig::default()
    };
    let rows: Vec<usize> = (0..train.x.n_rows()).collect();
    let model =
        train_model(ModelKind::Zip, &train.x, &train.y, &rows, &mcfg, &prep_cfg).map_err(e)?;
    let series = forecast_all(
        &model,
        &test.cohort,
        &test.panel,
        &test.x,
        ForecastMode::Evaluation,
    )
    .map_err(e)?;
    let icfg = IntervalConfig {
        levels: vec![0.8],
        ..IntervalConfig::default()
    };
    let mut inside = 0;
    for s in &series {
        let bands = prediction_intervals(s, model.dispersion, &icfg).map_err(e)?;
        let band = bands.band(0.8).ok_or("missing 80% band")?;
        let actual = *observed_cumulative(&test.panel, s).last().unwrap_or(&0.0);
        let last = band.upper.len() - 1;
        if band.lower[last] <= actual && actual <= band.upper[last] {
            inside += 1;
        }
    }
    let n = series.len();
    let coverage = inside as f64 / n as f64;
    let detail = format!(
        "80% band coverage {coverage:.3} over {n} studies (phi {:.3})",
        model.dispersion.phi
    );
    ensure(n >= 200, || format!("{detail}; too few studies"))?;
    ensure((0.70..=0.90).contains(&coverage), || detail.clone())?;
    Ok(detail)
}

fn c10_rolling() -> Outcome {
    let data = prepare(&GeneratorConfig {
        rate_drift_per_year: 0.15,
        rng_seed: 10,
        ..GeneratorConfig::default()
    })?;
    let splits = make_rolling_time_split(
        &data.cohort,
        Quarter::parse("2016Q1").unwrap(),
        Quarter::parse("2019Q4").unwrap(),
    )
    .map_err(e)?;
    ensure(splits.len() >= 8, || {
        format!("only {} quarters", splits.len())
    })?;
    let ecrf: BTreeMap<&str, NaiveDate> = data
        .cohort
        .studies()
        .iter()
        .map(|s| (s.study_id.as_str(), s.ecrf_date))
        .collect();
    for w in splits.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        ensure(a.train.is_subset(&b.train), || {
            format!("{}: train not nested", b.quarter)
        })?;
        ensure(
            a.test.is_subset(&b.train) || b.quarter != a.quarter.next(),
            || format!("{}: previous test studies missing from train", b.quarter),
        )?;
    }
    for s in &splits {
        ensure(s.train.is_disjoint(&s.test), || {
            format!("{}: train/test overlap", s.quarter)
        })?;
        let start = s.quarter.start();
        let next = s.quarter.next().start();
        ensure(s.train.iter().all(|id| ecrf[id.as_str()] < start), || {
            format!("{}: train study initiated too late", s.quarter)
        })?;
        ensure(
            s.test
                .iter()
                .all(|id| (start..next).contains(&ecrf[id.as_str()])),
            || format!("{}: test study outside quarter", s.quarter),
        )?;
    }

    let mut mcfg = ModelConfig::default();
    mcfg.gbt.n_rounds = 100;
    let prep_cfg = PreprocessConfig::default();
    let plan = make_random_split(&study_ids(&data.cohort), 0.0, 5, 10).map_err(e)?;
    let oof = cross_validate(
        ModelKind::GbtTweedie,
        &data.x,
        &data.y,
        &plan,
        &mcfg,
        &prep_cfg,
    )
    .map_err(e)?;
    let rows = rolling_evaluation(
        ModelKind::GbtTweedie,
        &data.x,
        &data.y,
        &data.panel,
        &splits,
        &oof,
        &mcfg,
        &prep_cfg,
    )
    .map_err(e)?;
    for s in &splits {
        for kind in [SplitKind::Time, SplitKind::Random] {
            ensure(
                rows.iter().any(|r| {
                    r.quarter == s.quarter && r.split == kind && r.metrics.mae.is_finite()
                }),
                || format!("{}: no {kind} MAE", s.quarter),
            )?;
        }
    }
    let time = pooled_mae(&rows, SplitKind::Time);
    let random = pooled_mae(&rows, SplitKind::Random);
    let detail = format!(
        "{} quarters nested; pooled MAE time {time:.2} vs random {random:.2}",
        splits.len()
    );
    ensure(time >= random, || detail.clone())?;
    Ok(detail)
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let text = r#"
seed = 11

[generator]
n_studies = 60

[model]
family = "gbt_tweedie"

[model.gbt]
n_rounds = 40

[model.regression]
max_iter = 30

[eval]
models = ["hist_rate", "gbt_tweedie"]

[intervals]
n_sims = 200
"#;
    std::fs::write(dir.join("run.toml"), text).map_err(e)?;
    let cfg = RunConfig::load(&dir.join("run.toml")).map_err(e)?;
    for cmd in Command::ALL {
        pipeline::run(cmd, &cfg, dir).map_err(e)?;
    }
    Ok(())
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn c11_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(e)?;
    let b = tempfile::tempdir().map_err(e)?;
    let t = Instant::now();
    run_pipeline(a.path())?;
    let first = t.elapsed();
    let t = Instant::now();
    run_pipeline(b.path())?;
    let ta = tree_bytes(a.path());
    let tb = tree_bytes(b.path());
    let rerun = t.elapsed();
    let names: HashSet<&String> = ta.keys().chain(tb.keys()).collect();
    let differing: Vec<&&String> = names
        .iter()
        .filter(|n| ta.get(**n) != tb.get(**n))
        .collect();
    ensure(differing.is_empty(), || {
        format!("artifacts differ: {differing:?}")
    })?;
    let detail = format!(
        "{} artifacts byte-identical; rerun and compare {rerun:.2?} vs pipeline {first:.2?}",
        ta.len()
    );
    ensure(rerun < 2 * first, || {
        format!("{detail}; check slower than twice the pipeline")
    })?;
    Ok(detail)
}

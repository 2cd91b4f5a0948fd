use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[generator]
n_studies = 40

[model]
family = "gbt_tweedie"

[model.gbt]
n_rounds = 30

[model.regression]
max_iter = 20

[eval]
models = ["hist_rate", "gbt_tweedie"]

[intervals]
n_sims = 200
"#;

const STEPS: [&str; 6] = [
    "gen",
    "prepare",
    "train",
    "predict",
    "evaluate",
    "intervals",
];

fn enrollcast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enrollcast"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn run_all(dir: &Path) {
    for step in STEPS {
        let out = enrollcast(dir, &[step]);
        assert!(
            out.status.success(),
            "{step} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = setup(SMALL);
    let b = setup(SMALL);
    run_all(a.path());
    run_all(b.path());

    let files = snapshot(a.path());
    for name in [
        "data/studies.csv",
        "data/sites.csv",
        "data/events.csv",
        "work/features.csv",
        "work/model.json",
        "out/forecast.csv",
        "out/study_forecast.csv",
        "out/metrics.csv",
        "out/leaderboard.md",
        "out/calibration.csv",
        "out/bands.csv",
    ] {
        assert!(files.contains_key(name), "missing {name}");
    }
    for step in STEPS {
        let m = files
            .keys()
            .find(|k| k.ends_with(&format!("manifest_{step}.json")));
        assert!(m.is_some(), "no manifest for {step}");
    }
    let other = snapshot(b.path());
    assert_eq!(
        files.keys().collect::<Vec<_>>(),
        other.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &files {
        assert!(other[name] == *bytes, "{name} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_cohort() {
    let a = setup(SMALL);
    let b = setup(SMALL);
    assert!(enrollcast(a.path(), &["gen"]).status.success());
    assert!(enrollcast(b.path(), &["gen", "--seed", "6"])
        .status
        .success());
    let read = |d: &Path| fs::read(d.join("data/events.csv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn config_errors_exit_with_2_and_name_the_key() {
    let dir = setup("[model.gbt]\nn_rounds = -3\n");
    let out = enrollcast(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.gbt.n_rounds"));

    let dir = setup("[model]\ntweedie_p = 2.5\n");
    let out = enrollcast(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.tweedie_p"));

    let dir = setup("[eval]\nno_such_key = 1\n");
    assert_eq!(enrollcast(dir.path(), &["evaluate"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_3() {
    let dir = setup(SMALL);
    let out = enrollcast(dir.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(3));
    let out = enrollcast(dir.path(), &["predict"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_data_exits_with_3() {
    let dir = setup(SMALL);
    assert!(enrollcast(dir.path(), &["gen"]).status.success());
    let events = dir.path().join("data/events.csv");
    let mut text = fs::read_to_string(&events).unwrap();
    text.push_str("S00001,F99999,PX,2015-01-01\n");
    fs::write(&events, text).unwrap();
    let out = enrollcast(dir.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(3));
}

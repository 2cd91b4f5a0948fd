use std::collections::BTreeSet;

use chrono::Days;
use proptest::prelude::*;

use enrollcast::calendar::{Quarter, YearMonth};
use enrollcast::evalharness::{
    error_summary, make_random_split, make_rolling_time_split, Assignment,
};
use enrollcast::features::{
    assemble_design_matrix, fit_preprocess, hierarchical_impute, is_missing, Column, ColumnKind,
    Consumer, FeatureConfig, FeatureMatrix, GroupingSpec, ImputationLadder, Level, Metric,
    PreprocessConfig, RowKey, EXHAUSTED_RUNG, MISSING,
};
use enrollcast::models::{ForecastSeries, SiteForecast};
use enrollcast::syncohort::{generate_cohort, GeneratorConfig};
use enrollcast::trialdata::{
    build_site_month_panel, compute_milestones, IntegrityConfig, Milestone,
};

fn small_cohort(seed: u64, n: usize) -> enrollcast::trialdata::Cohort {
    generate_cohort(&GeneratorConfig {
        n_studies: n,
        sites_per_study: [2, 6],
        facility_pool_size: 40,
        rng_seed: seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .0
}

fn keys(n: usize) -> Vec<RowKey> {
    (0..n)
        .map(|i| RowKey {
            study_id: format!("S{i:03}"),
            facility_id: "F".into(),
            month_index: 0,
        })
        .collect()
}

fn maybe_missing() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(MISSING), 2 => 0.0..10.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn later_events_never_reach_feature_rows(seed in 0u64..1000, pick in 0.0..1.0f64) {
        let cohort = small_cohort(seed, 24);
        let cfg = FeatureConfig::default();
        let panel = build_site_month_panel(&cohort).unwrap();
        let x = assemble_design_matrix(&cohort, &panel, &cfg).unwrap();
        let focal = &cohort.studies()[(pick * 23.0) as usize];
        let events = cohort
            .events()
            .iter()
            .flat_map(|ev| {
                if ev.enrollment_date <= focal.ecrf_date {
                    return vec![ev.clone()];
                }
                let mut dup = ev.clone();
                dup.patient_id.push_str("-x");
                let mut kept = ev.clone();
                if ev.study_id != focal.study_id {
                    kept.enrollment_date = ev.enrollment_date + Days::new(45);
                }
                vec![kept, dup]
            })
            .collect();
        let mutated = cohort.with_events(events, IntegrityConfig::default()).unwrap();
        let mpanel = build_site_month_panel(&mutated).unwrap();
        let mx = assemble_design_matrix(&mutated, &mpanel, &cfg).unwrap();
        let rows = |m: &FeatureMatrix| -> Vec<(RowKey, Vec<u64>)> {
            m.keys()
                .iter()
                .enumerate()
                .filter(|(_, k)| k.study_id == focal.study_id)
                .map(|(i, k)| (k.clone(), m.columns().iter().map(|c| c.values[i].to_bits()).collect()))
                .collect()
        };
        prop_assert_eq!(rows(&x), rows(&mx));
    }

    #[test]
    fn milestones_are_ordered(seed in 0u64..1000) {
        let cohort = small_cohort(seed, 10);
        for s in cohort.studies() {
            let m = compute_milestones(&cohort, &s.study_id).unwrap();
            prop_assert!(m.get(Milestone::Half) <= m.get(Milestone::Ninety));
            prop_assert!(m.get(Milestone::Ninety) <= m.get(Milestone::Last));
        }
    }

    #[test]
    fn rolling_splits_nest(seed in 0u64..1000) {
        let cohort = small_cohort(seed, 40);
        let splits = make_rolling_time_split(
            &cohort,
            Quarter::parse("2012Q1").unwrap(),
            Quarter::parse("2019Q4").unwrap(),
        )
        .unwrap();
        for w in splits.windows(2) {
            prop_assert!(w[0].train.is_subset(&w[1].train));
            let union: BTreeSet<_> = w[0].train.union(&w[0].test).cloned().collect();
            prop_assert!(union.is_subset(&w[1].train));
        }
        for s in &splits {
            prop_assert!(s.train.is_disjoint(&s.test));
            prop_assert!(!s.test.is_empty() && !s.train.is_empty());
        }
    }
}

proptest! {
    #[test]
    fn imputation_takes_first_present_rung(
        rows in prop::collection::vec(prop::collection::vec(maybe_missing(), 4), 1..40)
    ) {
        let names = ["country+indication", "indication", "indication_group", "therapeutic_area"];
        let specs: Vec<GroupingSpec> =
            names.iter().map(|n| GroupingSpec::parse(n, Metric::Rate).unwrap()).collect();
        let cols: Vec<Column> = specs
            .iter()
            .enumerate()
            .map(|(j, s)| {
                Column::numeric(
                    s.column_name(),
                    s.level(),
                    ColumnKind::Historical,
                    rows.iter().map(|r| r[j]).collect(),
                )
            })
            .collect();
        let m = FeatureMatrix::new(keys(rows.len()), cols).unwrap();
        let out = hierarchical_impute(m, &ImputationLadder::new(specs.clone()).unwrap()).unwrap();
        let target = out.require(&specs[0].column_name()).unwrap();
        let rungs = target.rungs.as_ref().unwrap();
        for (i, r) in rows.iter().enumerate() {
            match r.iter().position(|v| !is_missing(*v)) {
                Some(k) => {
                    prop_assert_eq!(target.values[i].to_bits(), r[k].to_bits());
                    prop_assert_eq!(rungs[i] as usize, k);
                }
                None => {
                    prop_assert!(is_missing(target.values[i]));
                    prop_assert_eq!(rungs[i], EXHAUSTED_RUNG);
                }
            }
        }
    }

    #[test]
    fn winsorized_values_stay_below_the_cap(
        values in prop::collection::vec(-50.0..500.0f64, 2..80),
        train_share in 0.2..1.0f64,
    ) {
        let n = values.len();
        let m = FeatureMatrix::new(
            keys(n),
            vec![Column::numeric("rate__country", Level::Country, ColumnKind::Historical, values)],
        )
        .unwrap();
        let train: Vec<usize> = (0..((n as f64 * train_share).ceil() as usize).max(1)).collect();
        let (params, fitted) =
            fit_preprocess(&m, &train, &PreprocessConfig::default(), Consumer::Tree).unwrap();
        let cap = params.winsor[0].1;
        let replay = params.apply(&m).unwrap();
        for out in [&fitted, &replay] {
            let col = out.require("rate__country").unwrap();
            prop_assert!(col.values.iter().all(|v| *v <= cap));
        }
    }

    #[test]
    fn squared_mae_never_exceeds_mse(errors in prop::collection::vec(-1e3..1e3f64, 1..200)) {
        let (mae, _, mse, _) = error_summary(&errors);
        prop_assert!(mae * mae <= mse * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn random_split_partitions_studies(
        n in 6usize..200,
        frac in 0.0..0.5f64,
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
        let Ok(plan) = make_random_split(&ids, frac, k, seed) else {
            return Ok(());
        };
        prop_assert_eq!(plan.assignment.len(), n);
        prop_assert_eq!(plan.holdout().len(), (n as f64 * frac).round() as usize);
        let sizes: Vec<usize> = (0..k).map(|f| plan.fold(f).len()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>() + plan.holdout().len(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let folds_ok = plan
            .assignment
            .values()
            .all(|a| !matches!(a, Assignment::Fold(f) if *f >= k));
        prop_assert!(folds_ok);
        let again = make_random_split(&ids, frac, k, seed).unwrap();
        prop_assert_eq!(plan, again);
    }

    #[test]
    fn study_series_is_the_sum_of_sites(
        sites in prop::collection::vec(
            (0usize..6, prop::collection::vec(0.0..5.0f64, 1..12)),
            1..6,
        ),
        target in 1u32..60,
    ) {
        let forecasts: Vec<SiteForecast> = sites
            .iter()
            .enumerate()
            .map(|(i, (offset, monthly))| SiteForecast {
                facility_id: format!("F{i}"),
                country: "US".into(),
                offset: *offset,
                monthly: monthly.clone(),
            })
            .collect();
        let s = ForecastSeries::from_sites("S", YearMonth::new(2020, 1), target, forecasts);
        let mut brute = vec![0.0; s.months()];
        for (offset, monthly) in &sites {
            for (m, v) in monthly.iter().enumerate() {
                brute[offset + m] += v;
            }
        }
        for (a, b) in s.study_monthly.iter().zip(&brute) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let total: f64 = sites.iter().flat_map(|(_, m)| m.iter()).sum();
        prop_assert!((s.total() - total).abs() <= 1e-9);
        prop_assert!(s.cumulative.windows(2).all(|w| w[0] <= w[1]));
        let ms = s.milestone_months(target);
        let ordered: Vec<usize> = ms.iter().flatten().copied().collect();
        prop_assert!(ordered.windows(2).all(|w| w[0] <= w[1]));
        if let Some(last) = ms[2] {
            prop_assert!(s.cumulative[last - 1] >= target as f64);
        }
    }
}

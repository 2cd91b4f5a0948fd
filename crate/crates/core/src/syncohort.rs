//! Synthetic cohorts drawn from a zero-inflated, seasonal, heterogeneous-rate
//! Poisson process, with the exact generative expectation kept as ground
//! truth.
//!
//! Each study-site gets a rate
//! `base_rate(indication) * drift(ecrf year) * facility_effect * site_noise`,
//! where `facility_effect` is persistent across every trial the facility
//! joins and `site_noise ~ Gamma(shape, 1/shape)`. With probability
//! `zero_inflation` the study-site is a structural zero. Monthly counts are
//! `Poisson(rate * seas(calendar_month) * country_multiplier)` with
//! `seas(m) = 1 + amplitude * sin(2 pi m / 12)`. A study stops in the month
//! its cumulative enrollment reaches `target_enrollment`; surplus events in
//! that month are dropped in date order. With `stop_at_target` off, studies
//! instead run for their planned duration.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::trialdata::{
    Cohort, EnrollmentEvent, Gender, IntegrityConfig, Phase, StudyRecord, StudySiteRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicationEntry {
    pub therapeutic_area: String,
    pub indication_group: String,
    pub indication: String,
    /// Expected patients per site per month before multipliers.
    pub base_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountryEntry {
    pub country: String,
    pub rate_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_studies: usize,
    /// Inclusive `[min, max]`.
    pub sites_per_study: [u32; 2],
    pub ta_catalog: Vec<IndicationEntry>,
    /// Probability that a study-site never enrolls.
    pub zero_inflation: f64,
    /// Gamma shape of the per-study-site rate noise (mean one).
    pub site_rate_shape: f64,
    /// Gamma shape of the persistent per-facility multiplier (mean one);
    /// zero disables facility effects.
    pub facility_effect_shape: f64,
    pub seasonal_amplitude: f64,
    pub country_catalog: Vec<CountryEntry>,
    /// Inclusive `[min, max]` months between eCRF finalization and site
    /// creation, drawn uniformly.
    pub activation_stagger_months: [u32; 2],
    /// Inclusive `[min, max]` planned enrollment duration used to set each
    /// study's target from its expected site rates.
    pub target_duration_months: [u32; 2],
    pub facility_pool_size: usize,
    pub n_sponsors: usize,
    /// eCRF dates are uniform over `[start_year-01-01, end_year-12-31]`.
    pub start_year: i32,
    pub end_year: i32,
    /// Log-rate drift per year since `start_year`; zero is stationary.
    pub rate_drift_per_year: f64,
    /// Studies that have not reached target after this many months stop and
    /// are flagged.
    pub max_months: u32,
    /// When false every study runs for its planned duration whatever it
    /// enrolls, so observed spans do not depend on the counts.
    pub stop_at_target: bool,
    pub rng_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let ind = |ta: &str, g: &str, i: &str, r: f64| IndicationEntry {
            therapeutic_area: ta.into(),
            indication_group: g.into(),
            indication: i.into(),
            base_rate: r,
        };
        let ctry = |c: &str, m: f64| CountryEntry {
            country: c.into(),
            rate_multiplier: m,
        };
        GeneratorConfig {
            n_studies: 300,
            sites_per_study: [5, 30],
            ta_catalog: vec![
                ind("oncology", "solid_tumor", "nsclc", 0.12),
                ind("oncology", "solid_tumor", "breast_cancer", 0.18),
                ind("oncology", "hematologic", "leukemia", 0.08),
                ind("oncology", "hematologic", "lymphoma", 0.10),
                ind("cardiology", "heart_failure", "hfref", 0.25),
                ind("cardiology", "arrhythmia", "atrial_fibrillation", 0.30),
                ind("dermatology", "inflammatory_skin", "psoriasis", 0.45),
                ind(
                    "dermatology",
                    "inflammatory_skin",
                    "atopic_dermatitis",
                    0.50,
                ),
                ind("neurology", "neurodegenerative", "alzheimers", 0.15),
                ind("neurology", "neurodegenerative", "parkinsons", 0.20),
                ind("neurology", "seizure", "epilepsy", 0.22),
                ind("endocrinology", "diabetes", "type2_diabetes", 0.60),
            ],
            zero_inflation: 0.03,
            site_rate_shape: 3.0,
            facility_effect_shape: 1.5,
            seasonal_amplitude: 0.3,
            country_catalog: vec![
                ctry("US", 1.0),
                ctry("DE", 0.8),
                ctry("FR", 0.7),
                ctry("GB", 0.9),
                ctry("ES", 1.1),
                ctry("PL", 1.6),
                ctry("CN", 1.4),
                ctry("JP", 0.6),
                ctry("BR", 1.3),
                ctry("CA", 0.9),
            ],
            activation_stagger_months: [0, 8],
            target_duration_months: [8, 30],
            facility_pool_size: 600,
            n_sponsors: 40,
            start_year: 2010,
            end_year: 2019,
            rate_drift_per_year: 0.0,
            max_months: 120,
            stop_at_target: true,
            rng_seed: 20240501,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("generator.{key}"),
                message,
            })
        };
        if self.n_studies == 0 {
            return bad("n_studies", "must be positive".into());
        }
        if self.sites_per_study[0] == 0 || self.sites_per_study[0] > self.sites_per_study[1] {
            return bad("sites_per_study", "need 1 <= min <= max".into());
        }
        if self.ta_catalog.is_empty() {
            return bad("ta_catalog", "must not be empty".into());
        }
        if let Some(e) = self
            .ta_catalog
            .iter()
            .find(|e| !(e.base_rate > 0.0 && e.base_rate.is_finite()))
        {
            return bad(
                "ta_catalog",
                format!("base_rate of {} must be > 0", e.indication),
            );
        }
        if !(0.0..=1.0).contains(&self.zero_inflation) {
            return bad("zero_inflation", "must lie in [0, 1]".into());
        }
        if !(self.site_rate_shape > 0.0) {
            return bad("site_rate_shape", "must be > 0".into());
        }
        if !(self.facility_effect_shape >= 0.0) {
            return bad("facility_effect_shape", "must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return bad("seasonal_amplitude", "must lie in [0, 1)".into());
        }
        if self.country_catalog.is_empty() {
            return bad("country_catalog", "must not be empty".into());
        }
        if self
            .country_catalog
            .iter()
            .any(|c| !(c.rate_multiplier > 0.0))
        {
            return bad("country_catalog", "rate_multiplier must be > 0".into());
        }
        if self.activation_stagger_months[0] > self.activation_stagger_months[1] {
            return bad("activation_stagger_months", "need min <= max".into());
        }
        if self.target_duration_months[0] == 0
            || self.target_duration_months[0] > self.target_duration_months[1]
        {
            return bad("target_duration_months", "need 1 <= min <= max".into());
        }
        if self.facility_pool_size < self.sites_per_study[1] as usize {
            return bad(
                "facility_pool_size",
                "must be at least sites_per_study max".into(),
            );
        }
        if self.n_sponsors == 0 {
            return bad("n_sponsors", "must be positive".into());
        }
        if self.start_year > self.end_year {
            return bad("start_year", "must not exceed end_year".into());
        }
        if self.max_months == 0 {
            return bad("max_months", "must be positive".into());
        }
        Ok(())
    }
}

pub fn seasonal_multiplier(amplitude: f64, calendar_month: u32) -> f64 {
    1.0 + amplitude * (2.0 * PI * f64::from(calendar_month) / 12.0).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub study_id: String,
    pub facility_id: String,
    pub is_structural_zero: bool,
    /// Patients per month before seasonal and country multipliers.
    pub site_rate: f64,
    pub country_multiplier: f64,
    pub creation: YearMonth,
    /// Generative expectation for month indices `0..expected.len()`.
    pub expected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GroundTruth {
    /// Sorted by `(study_id, facility_id)`.
    pub sites: Vec<SiteTruth>,
    /// Studies that hit `max_months` before reaching target.
    pub capped_studies: Vec<String>,
}

impl GroundTruth {
    pub fn site(&self, study_id: &str, facility_id: &str) -> Option<&SiteTruth> {
        self.sites
            .binary_search_by(|s| {
                (s.study_id.as_str(), s.facility_id.as_str()).cmp(&(study_id, facility_id))
            })
            .ok()
            .map(|i| &self.sites[i])
    }

    /// Writes `study_id,facility_id,month_index,expected_count,is_structural_zero,site_rate`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            "study_id,facility_id,month_index,expected_count,is_structural_zero,site_rate"
        )
        .map_err(io)?;
        for s in &self.sites {
            for (m, e) in s.expected.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    s.study_id, s.facility_id, m, e, s.is_structural_zero, s.site_rate
                )
                .map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

/// Exact generative expectation for one study-site-month.
pub fn oracle_expected_count(
    truth: &GroundTruth,
    study_id: &str,
    facility_id: &str,
    month_index: u32,
) -> Result<f64> {
    let key = || format!("({study_id}, {facility_id}, {month_index})");
    let site = truth
        .site(study_id, facility_id)
        .ok_or_else(|| Error::UnknownKey(key()))?;
    site.expected
        .get(month_index as usize)
        .copied()
        .ok_or_else(|| Error::UnknownKey(key()))
}

struct Facility {
    country: usize,
    effect: f64,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn poisson_draw<R: Rng>(rng: &mut R, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u32
}

fn gamma_mean_one<R: Rng>(rng: &mut R, shape: f64) -> f64 {
    Gamma::new(shape, 1.0 / shape)
        .expect("positive shape")
        .sample(rng)
}

struct StudyDraw {
    study: StudyRecord,
    sites: Vec<StudySiteRecord>,
    events: Vec<EnrollmentEvent>,
    truth: Vec<SiteTruth>,
    capped: bool,
}

fn draw_study(cfg: &GeneratorConfig, ordinal: usize, facilities: &[Facility]) -> StudyDraw {
    let mut rng = stream(cfg.rng_seed, ordinal as u64 + 1);
    let study_id = format!("S{:05}", ordinal + 1);
    let entry = &cfg.ta_catalog[rng.random_range(0..cfg.ta_catalog.len())];

    let start = NaiveDate::from_ymd_opt(cfg.start_year, 1, 1).expect("valid year");
    let end = NaiveDate::from_ymd_opt(cfg.end_year, 12, 31).expect("valid year");
    let span_days = (end - start).num_days() as u64;
    let ecrf_date = start + Days::new(rng.random_range(0..=span_days));
    let years_in = (ecrf_date - start).num_days() as f64 / 365.25;
    let drift = (cfg.rate_drift_per_year * years_in).exp();

    let phase = match rng.random::<f64>() {
        u if u < 0.10 => Phase::I,
        u if u < 0.40 => Phase::II,
        u if u < 0.85 => Phase::III,
        _ => Phase::IV,
    };
    let gender = match rng.random::<f64>() {
        u if u < 0.85 => Gender::All,
        u if u < 0.95 => Gender::Female,
        _ => Gender::Male,
    };
    let sponsor_id = format!("SP{:03}", rng.random_range(0..cfg.n_sponsors) + 1);
    let cro_id = rng
        .random_bool(0.5)
        .then(|| format!("CRO{:02}", rng.random_range(0..10) + 1));
    let num_arms = rng.random_range(1..=4u32);
    let min_age = 18.0;
    let max_age = [65.0, 75.0, 85.0][rng.random_range(0..3)];

    let n_sites = rng.random_range(cfg.sites_per_study[0]..=cfg.sites_per_study[1]) as usize;
    let mut chosen: Vec<usize> = sample(&mut rng, facilities.len(), n_sites).into_vec();
    chosen.sort_unstable();

    let ecrf_month = YearMonth::of(ecrf_date);
    let mean_country = cfg
        .country_catalog
        .iter()
        .map(|c| c.rate_multiplier)
        .sum::<f64>()
        / cfg.country_catalog.len() as f64;

    struct SiteState {
        facility: usize,
        creation_date: NaiveDate,
        creation: YearMonth,
        rate: f64,
        country_mult: f64,
        zero: bool,
    }
    let mut states: Vec<SiteState> = Vec::with_capacity(n_sites);
    for &f in &chosen {
        let fac = &facilities[f];
        let stagger =
            rng.random_range(cfg.activation_stagger_months[0]..=cfg.activation_stagger_months[1]);
        let month = ecrf_month.plus(stagger as i32);
        let day = rng.random_range(0..month.days()) as u64;
        let mut creation_date = month.first_day() + Days::new(day);
        if creation_date < ecrf_date && stagger == 0 {
            creation_date = ecrf_date;
        }
        let noise = gamma_mean_one(&mut rng, cfg.site_rate_shape);
        let zero = rng.random_bool(cfg.zero_inflation);
        states.push(SiteState {
            facility: f,
            creation_date,
            creation: YearMonth::of(creation_date),
            rate: entry.base_rate * drift * fac.effect * noise,
            country_mult: cfg.country_catalog[fac.country].rate_multiplier,
            zero,
        });
    }

    let planned = rng.random_range(cfg.target_duration_months[0]..=cfg.target_duration_months[1]);
    let expected_per_month =
        n_sites as f64 * entry.base_rate * drift * (1.0 - cfg.zero_inflation) * mean_country;
    let target = ((expected_per_month * f64::from(planned)).round() as u32).max(1);

    let first_month = states
        .iter()
        .map(|s| s.creation)
        .min()
        .expect("at least one site");
    let mut raw: Vec<(NaiveDate, usize)> = Vec::new();
    let mut cumulative = 0u32;
    let mut last_month = first_month;
    let mut capped = true;
    let horizon = if cfg.stop_at_target {
        cfg.max_months
    } else {
        planned.min(cfg.max_months)
    };
    for m in 0..horizon as i32 {
        let ym = first_month.plus(m);
        last_month = ym;
        let seas = seasonal_multiplier(cfg.seasonal_amplitude, ym.month());
        let mut this_month: Vec<(NaiveDate, usize)> = Vec::new();
        for (i, s) in states.iter().enumerate() {
            if s.creation > ym || s.zero {
                continue;
            }
            let k = poisson_draw(&mut rng, s.rate * seas * s.country_mult);
            let first_day = if s.creation == ym {
                s.creation_date
            } else {
                ym.first_day()
            };
            let last_day = ym.plus(1).first_day();
            let window = (last_day - first_day).num_days() as u64;
            for _ in 0..k {
                this_month.push((first_day + Days::new(rng.random_range(0..window)), i));
            }
        }
        this_month.sort();
        if !cfg.stop_at_target {
            raw.extend(this_month);
            capped = false;
            continue;
        }
        let need = target - cumulative;
        if this_month.len() as u32 >= need {
            this_month.truncate(need as usize);
            raw.extend(this_month);
            capped = false;
            break;
        }
        cumulative += this_month.len() as u32;
        raw.extend(this_month);
    }
    // Patient ids follow enrollment order within the study.
    raw.sort();
    let mut events: Vec<EnrollmentEvent> = raw
        .iter()
        .enumerate()
        .map(|(n, &(date, i))| EnrollmentEvent {
            study_id: study_id.clone(),
            facility_id: facility_id(states[i].facility),
            patient_id: format!("{study_id}-P{:05}", n + 1),
            enrollment_date: date,
        })
        .collect();
    events.sort_by(|a, b| {
        (&a.facility_id, a.enrollment_date, &a.patient_id).cmp(&(
            &b.facility_id,
            b.enrollment_date,
            &b.patient_id,
        ))
    });

    let sites = states
        .iter()
        .map(|s| StudySiteRecord {
            study_id: study_id.clone(),
            facility_id: facility_id(s.facility),
            country: cfg.country_catalog[facilities[s.facility].country]
                .country
                .clone(),
            creation_date: s.creation_date,
            extras: vec![],
        })
        .collect();

    let truth = states
        .iter()
        .map(|s| {
            let n = last_month.months_since(s.creation).max(0) + 1;
            let expected = (0..n)
                .map(|m| {
                    if s.zero {
                        0.0
                    } else {
                        let cal = s.creation.plus(m).month();
                        s.rate * seasonal_multiplier(cfg.seasonal_amplitude, cal) * s.country_mult
                    }
                })
                .collect();
            SiteTruth {
                study_id: study_id.clone(),
                facility_id: facility_id(s.facility),
                is_structural_zero: s.zero,
                site_rate: s.rate,
                country_multiplier: s.country_mult,
                creation: s.creation,
                expected,
            }
        })
        .collect();

    let study = StudyRecord {
        study_id,
        ecrf_date,
        therapeutic_area: Some(entry.therapeutic_area.clone()),
        indication_group: entry.indication_group.clone(),
        indication: entry.indication.clone(),
        phase,
        sponsor_id,
        cro_id,
        target_enrollment: target,
        num_arms: Some(num_arms),
        min_age: Some(min_age),
        max_age: Some(max_age),
        gender,
        study_type: "interventional".into(),
        extras: vec![],
    };
    StudyDraw {
        study,
        sites,
        events,
        truth,
        capped,
    }
}

fn facility_id(i: usize) -> String {
    format!("F{:05}", i + 1)
}

/// Draws a full synthetic cohort. Output is a pure function of `cfg`: every
/// study uses its own random stream derived from `(rng_seed, ordinal)`, and
/// records are emitted sorted by study, facility and date.
pub fn generate_cohort(cfg: &GeneratorConfig) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let mut rng = stream(cfg.rng_seed, 0);
    let facilities: Vec<Facility> = (0..cfg.facility_pool_size)
        .map(|_| Facility {
            country: rng.random_range(0..cfg.country_catalog.len()),
            effect: if cfg.facility_effect_shape > 0.0 {
                gamma_mean_one(&mut rng, cfg.facility_effect_shape)
            } else {
                1.0
            },
        })
        .collect();

    let draws: Vec<StudyDraw> = (0..cfg.n_studies)
        .into_par_iter()
        .map(|i| draw_study(cfg, i, &facilities))
        .collect();

    let mut studies = Vec::with_capacity(draws.len());
    let mut sites = Vec::new();
    let mut events = Vec::new();
    let mut truth = GroundTruth::default();
    for d in draws {
        if d.capped {
            truth.capped_studies.push(d.study.study_id.clone());
        }
        studies.push(d.study);
        sites.extend(d.sites);
        events.extend(d.events);
        truth.sites.extend(d.truth);
    }
    if !truth.capped_studies.is_empty() {
        log::warn!(
            "{} studies reached the {}-month cap before target",
            truth.capped_studies.len(),
            cfg.max_months
        );
    }
    let cohort = Cohort::new(studies, sites, events, IntegrityConfig::default())?;
    Ok((cohort, truth))
}

/// Generates a cohort and writes the three cohort CSVs plus `truth.csv`.
pub fn write_generated(cfg: &GeneratorConfig, dir: &Path) -> Result<(Cohort, GroundTruth)> {
    let (cohort, truth) = generate_cohort(cfg)?;
    crate::trialdata::write_cohort(&cohort, dir)?;
    truth.write_csv(&dir.join("truth.csv"))?;
    Ok((cohort, truth))
}

/// Structural-zero rate per study, keyed by study id.
pub fn structural_zero_counts(truth: &GroundTruth) -> HashMap<&str, (usize, usize)> {
    let mut out: HashMap<&str, (usize, usize)> = HashMap::new();
    for s in &truth.sites {
        let e = out.entry(s.study_id.as_str()).or_default();
        e.0 += usize::from(s.is_structural_zero);
        e.1 += 1;
    }
    out
}

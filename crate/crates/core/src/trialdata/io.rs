use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use super::{
    Cohort, EnrollmentEvent, Exclusion, IntegrityConfig, StudyRecord, StudySiteRecord, EVENTS_FILE,
    SITES_FILE, STUDIES_FILE,
};
use crate::calendar::parse_date;
use crate::error::{Error, Result};

pub const STUDIES_HEADER: &[&str] = &[
    "study_id",
    "ecrf_date",
    "ta",
    "indication_group",
    "indication",
    "phase",
    "sponsor_id",
    "cro_id",
    "target_enrollment",
    "num_arms",
    "min_age",
    "max_age",
    "gender",
    "study_type",
];
pub const SITES_HEADER: &[&str] = &["study_id", "facility_id", "country", "creation_date"];
pub const EVENTS_HEADER: &[&str] = &["study_id", "facility_id", "patient_id", "enrollment_date"];

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(path: &Path, required: &[&str]) -> Result<Table> {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let handle = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(handle);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(Ok(h)) => h.iter().map(|s| s.trim().to_string()).collect(),
        Some(Err(e)) => {
            return Err(Error::Csv {
                file,
                row: 1,
                message: e.to_string(),
            })
        }
        None => {
            return Err(Error::Csv {
                file,
                row: 1,
                message: "missing header".into(),
            })
        }
    };
    if header.len() < required.len() || header[..required.len()] != *required {
        return Err(Error::Csv {
            file,
            row: 1,
            message: format!("expected header starting with {}", required.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Csv {
            file: file.clone(),
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        rows.push((line, rec));
    }
    Ok(Table { file, header, rows })
}

struct Row<'a> {
    file: &'a str,
    line: usize,
    header: &'a [String],
    rec: &'a csv::StringRecord,
}

impl Row<'_> {
    fn raw(&self, col: usize) -> &str {
        self.rec.get(col).unwrap_or("").trim()
    }

    fn fail(&self, col: usize, message: impl Into<String>) -> Error {
        Error::Field {
            file: self.file.to_string(),
            row: self.line,
            column: self.header[col].clone(),
            value: self.raw(col).to_string(),
            message: message.into(),
        }
    }

    fn text(&self, col: usize) -> Result<String> {
        let v = self.raw(col);
        if v.is_empty() {
            return Err(self.fail(col, "required value is empty"));
        }
        Ok(v.to_string())
    }

    fn opt_text(&self, col: usize) -> Option<String> {
        let v = self.raw(col);
        (!v.is_empty()).then(|| v.to_string())
    }

    fn date(&self, col: usize) -> Result<NaiveDate> {
        parse_date(self.raw(col)).ok_or_else(|| self.fail(col, "expected YYYY-MM-DD"))
    }

    fn parse<T: std::str::FromStr>(&self, col: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(col)
            .parse::<T>()
            .map_err(|e| self.fail(col, e.to_string()))
    }

    fn opt_parse<T: std::str::FromStr>(&self, col: usize) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(col).is_empty() {
            Ok(None)
        } else {
            self.parse(col).map(Some)
        }
    }

    fn extras(&self, from: usize) -> Result<Vec<Option<f64>>> {
        (from..self.header.len())
            .map(|c| self.opt_parse::<f64>(c))
            .collect()
    }
}

/// Loads the three cohort CSVs and enforces referential integrity. Columns
/// after the required header are carried through as optional numeric
/// pass-through features.
pub fn load_cohort(study_path: &Path, site_path: &Path, event_path: &Path) -> Result<Cohort> {
    load_cohort_with(
        study_path,
        site_path,
        event_path,
        IntegrityConfig::default(),
    )
}

pub fn load_cohort_with(
    study_path: &Path,
    site_path: &Path,
    event_path: &Path,
    integrity: IntegrityConfig,
) -> Result<Cohort> {
    let st = read_table(study_path, STUDIES_HEADER)?;
    let mut studies = Vec::with_capacity(st.rows.len());
    for (line, rec) in &st.rows {
        let r = Row {
            file: &st.file,
            line: *line,
            header: &st.header,
            rec,
        };
        studies.push(StudyRecord {
            study_id: r.text(0)?,
            ecrf_date: r.date(1)?,
            therapeutic_area: r.opt_text(2),
            indication_group: r.text(3)?,
            indication: r.text(4)?,
            phase: r.parse(5)?,
            sponsor_id: r.text(6)?,
            cro_id: r.opt_text(7),
            target_enrollment: r.parse(8)?,
            num_arms: r.opt_parse(9)?,
            min_age: r.opt_parse(10)?,
            max_age: r.opt_parse(11)?,
            gender: r.parse(12)?,
            study_type: r.opt_text(13).unwrap_or_else(|| "interventional".into()),
            extras: r.extras(STUDIES_HEADER.len())?,
        });
    }

    let si = read_table(site_path, SITES_HEADER)?;
    let mut sites = Vec::with_capacity(si.rows.len());
    for (line, rec) in &si.rows {
        let r = Row {
            file: &si.file,
            line: *line,
            header: &si.header,
            rec,
        };
        sites.push(StudySiteRecord {
            study_id: r.text(0)?,
            facility_id: r.text(1)?,
            country: r.text(2)?,
            creation_date: r.date(3)?,
            extras: r.extras(SITES_HEADER.len())?,
        });
    }

    let ev = read_table(event_path, EVENTS_HEADER)?;
    let mut events = Vec::with_capacity(ev.rows.len());
    for (line, rec) in &ev.rows {
        let r = Row {
            file: &ev.file,
            line: *line,
            header: &ev.header,
            rec,
        };
        events.push(EnrollmentEvent {
            study_id: r.text(0)?,
            facility_id: r.text(1)?,
            patient_id: r.text(2)?,
            enrollment_date: r.date(3)?,
        });
    }

    let study_extra = st.header[STUDIES_HEADER.len()..].to_vec();
    let site_extra = si.header[SITES_HEADER.len()..].to_vec();
    // Integrity errors are reported against data-row positions; map them back
    // onto file lines so they match what a user sees in an editor.
    let study_lines: Vec<usize> = st.rows.iter().map(|(l, _)| *l).collect();
    let site_lines: Vec<usize> = si.rows.iter().map(|(l, _)| *l).collect();
    let event_lines: Vec<usize> = ev.rows.iter().map(|(l, _)| *l).collect();
    Cohort::with_extras(studies, sites, events, study_extra, site_extra, integrity).map_err(|e| {
        let remap = |file: &str, row: usize| -> usize {
            let lines = match file {
                STUDIES_FILE => &study_lines,
                SITES_FILE => &site_lines,
                EVENTS_FILE => &event_lines,
                _ => return row,
            };
            lines.get(row.saturating_sub(2)).copied().unwrap_or(row)
        };
        match e {
            Error::DanglingKey { file, row, key } => {
                let row = remap(&file, row);
                Error::DanglingKey {
                    file: display_name(&file, study_path, site_path, event_path),
                    row,
                    key,
                }
            }
            Error::Integrity { file, row, message } => {
                let row = remap(&file, row);
                Error::Integrity {
                    file: display_name(&file, study_path, site_path, event_path),
                    row,
                    message,
                }
            }
            other => other,
        }
    })
}

fn display_name(logical: &str, studies: &Path, sites: &Path, events: &Path) -> String {
    let p = match logical {
        STUDIES_FILE => studies,
        SITES_FILE => sites,
        EVENTS_FILE => events,
        _ => return logical.to_string(),
    };
    p.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| logical.to_string())
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes `studies.csv`, `sites.csv` and `events.csv` into `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(STUDIES_FILE);
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = STUDIES_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(cohort.study_extra_columns().iter().cloned());
    w.write_record(&header).map_err(write_err(&path))?;
    for s in cohort.studies() {
        let mut rec = vec![
            s.study_id.clone(),
            s.ecrf_date.to_string(),
            opt(&s.therapeutic_area),
            s.indication_group.clone(),
            s.indication.clone(),
            s.phase.to_string(),
            s.sponsor_id.clone(),
            opt(&s.cro_id),
            s.target_enrollment.to_string(),
            opt(&s.num_arms),
            opt(&s.min_age),
            opt(&s.max_age),
            s.gender.to_string(),
            s.study_type.clone(),
        ];
        rec.extend(s.extras.iter().map(opt));
        w.write_record(&rec).map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SITES_FILE);
    let mut w = csv_writer(&path)?;
    let mut header: Vec<String> = SITES_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(cohort.site_extra_columns().iter().cloned());
    w.write_record(&header).map_err(write_err(&path))?;
    for s in cohort.sites() {
        let mut rec = vec![
            s.study_id.clone(),
            s.facility_id.clone(),
            s.country.clone(),
            s.creation_date.to_string(),
        ];
        rec.extend(s.extras.iter().map(opt));
        w.write_record(&rec).map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(EVENTS_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(EVENTS_HEADER).map_err(write_err(&path))?;
    for e in cohort.events() {
        w.write_record([
            e.study_id.as_str(),
            e.facility_id.as_str(),
            e.patient_id.as_str(),
            &e.enrollment_date.to_string(),
        ])
        .map_err(write_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Writes the exclusion log as `entity_id,rule`.
pub fn write_exclusions(log: &[Exclusion], path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("entity_id,rule\n");
    for x in log {
        out.push_str(&x.entity_id);
        out.push(',');
        out.push_str(&x.rule);
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

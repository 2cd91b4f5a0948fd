use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Missing-value marker. Every consumer tests with [`is_missing`].
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    Study,
    Country,
    Site,
    SiteMonth,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Study => "study",
            Level::Country => "country",
            Level::Site => "site",
            Level::SiteMonth => "site-month",
        })
    }
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "study" => Ok(Level::Study),
            "country" => Ok(Level::Country),
            "site" => Ok(Level::Site),
            "site-month" => Ok(Level::SiteMonth),
            o => Err(format!("unknown level {o:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    /// Numeric column derived from historical trials; subject to
    /// winsorization.
    Historical,
    /// Values are codes into [`Column::levels`].
    Categorical,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Numeric => "numeric",
            ColumnKind::Historical => "historical",
            ColumnKind::Categorical => "categorical",
        })
    }
}

impl FromStr for ColumnKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "numeric" => Ok(ColumnKind::Numeric),
            "historical" => Ok(ColumnKind::Historical),
            "categorical" => Ok(ColumnKind::Categorical),
            o => Err(format!("unknown column kind {o:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub level: Level,
    pub kind: ColumnKind,
    /// Fallback columns walked by hierarchical imputation, if any.
    pub ladder: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub meta: ColumnMeta,
    pub values: Vec<f64>,
    /// Sorted level dictionary for categorical columns.
    pub levels: Vec<String>,
    /// Ladder rung used per row after imputation (0 = own value).
    pub rungs: Option<Vec<u8>>,
}

impl Column {
    pub fn numeric(
        name: impl Into<String>,
        level: Level,
        kind: ColumnKind,
        values: Vec<f64>,
    ) -> Self {
        Column {
            name: name.into(),
            meta: ColumnMeta {
                level,
                kind,
                ladder: Vec::new(),
            },
            values,
            levels: Vec::new(),
            rungs: None,
        }
    }

    /// Builds a categorical column from optional labels; the dictionary is
    /// the sorted set of labels present.
    pub fn categorical(name: impl Into<String>, level: Level, labels: &[Option<&str>]) -> Self {
        let mut levels: Vec<String> = labels.iter().flatten().map(|s| s.to_string()).collect();
        levels.sort();
        levels.dedup();
        let index: HashMap<&str, usize> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let values = labels
            .iter()
            .map(|l| l.map_or(MISSING, |l| index[l] as f64))
            .collect();
        Column {
            name: name.into(),
            meta: ColumnMeta {
                level,
                kind: ColumnKind::Categorical,
                ladder: Vec::new(),
            },
            values,
            levels,
            rungs: None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.meta.kind == ColumnKind::Categorical
    }

    pub fn label(&self, row: usize) -> Option<&str> {
        let v = self.values[row];
        if is_missing(v) {
            None
        } else {
            Some(self.levels[v as usize].as_str())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub study_id: String,
    pub facility_id: String,
    pub month_index: u32,
}

/// Column-major design matrix with explicit missing markers and per-column
/// provenance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    keys: Vec<RowKey>,
    columns: Vec<Column>,
}

impl FeatureMatrix {
    pub fn new(keys: Vec<RowKey>, columns: Vec<Column>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if c.values.len() != keys.len() {
                return Err(Error::InvalidParam(format!(
                    "column {} has {} values for {} rows",
                    c.name,
                    c.values.len(),
                    keys.len()
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidParam(format!("duplicate column {}", c.name)));
            }
        }
        let mut sorted: Vec<&RowKey> = keys.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParam("duplicate row keys".into()));
        }
        Ok(FeatureMatrix { keys, columns })
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn columns_mut(&mut self) -> &mut [Column] {
        &mut self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub(crate) fn into_parts(self) -> (Vec<RowKey>, Vec<Column>) {
        (self.keys, self.columns)
    }

    /// Hash over the ordered column names, kinds and levels.
    pub fn schema_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.columns {
            h.update(format!("{}:{}:{}\n", c.name, c.meta.kind, c.meta.level).as_bytes());
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Rows at `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    values: idx.iter().map(|&i| c.values[i]).collect(),
                    rungs: c
                        .rungs
                        .as_ref()
                        .map(|r| idx.iter().map(|&i| r[i]).collect()),
                    ..c.clone_meta()
                })
                .collect(),
        }
    }

    /// Row indices whose study satisfies `keep`.
    pub fn rows_where<F: Fn(&str) -> bool>(&self, keep: F) -> Vec<usize> {
        self.keys
            .iter()
            .enumerate()
            .filter(|(_, k)| keep(&k.study_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-major dense copy of the value grid.
    pub fn row_major(&self) -> Vec<f64> {
        let (n, p) = (self.n_rows(), self.n_cols());
        let mut out = vec![0.0; n * p];
        for (j, c) in self.columns.iter().enumerate() {
            for (i, v) in c.values.iter().enumerate() {
                out[i * p + j] = *v;
            }
        }
        out
    }

    pub fn write_csv(&self, features_path: &Path, schema_path: &Path) -> Result<()> {
        let f = File::create(features_path).map_err(|e| Error::io(features_path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(features_path, e);
        let mut header = String::from("study_id,facility_id,month_index");
        for c in &self.columns {
            header.push(',');
            header.push_str(&c.name);
        }
        writeln!(w, "{header}").map_err(io)?;
        let mut line = String::new();
        for (i, k) in self.keys.iter().enumerate() {
            line.clear();
            line.push_str(&format!(
                "{},{},{}",
                k.study_id, k.facility_id, k.month_index
            ));
            for c in &self.columns {
                line.push(',');
                if let Some(l) = c.is_categorical().then(|| c.label(i)).flatten() {
                    line.push_str(l);
                } else if !is_missing(c.values[i]) {
                    line.push_str(&c.values[i].to_string());
                }
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;

        let f = File::create(schema_path).map_err(|e| Error::io(schema_path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(schema_path, e);
        writeln!(w, "column,level,kind,imputation_rung_default").map_err(io)?;
        for c in &self.columns {
            writeln!(
                w,
                "{},{},{},{}",
                c.name,
                c.meta.level,
                c.meta.kind,
                c.meta.ladder.join(">")
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(features_path: &Path, schema_path: &Path) -> Result<FeatureMatrix> {
        let open = |p: &Path| -> Result<csv::Reader<File>> {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
        };
        let file_of = |p: &Path| {
            p.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        let csv_err = |p: &Path, row: usize, message: String| Error::Csv {
            file: file_of(p),
            row,
            message,
        };

        let mut metas: Vec<(String, ColumnMeta)> = Vec::new();
        let mut r = open(schema_path)?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(schema_path, i + 2, e.to_string()))?;
            let get = |j: usize| rec.get(j).unwrap_or("");
            let level = get(1).parse().map_err(|e| csv_err(schema_path, i + 2, e))?;
            let kind = get(2).parse().map_err(|e| csv_err(schema_path, i + 2, e))?;
            let ladder = if get(3).is_empty() {
                Vec::new()
            } else {
                get(3).split('>').map(str::to_string).collect()
            };
            metas.push((
                get(0).to_string(),
                ColumnMeta {
                    level,
                    kind,
                    ladder,
                },
            ));
        }

        let mut r = open(features_path)?;
        let header = r
            .headers()
            .map_err(|e| csv_err(features_path, 1, e.to_string()))?
            .clone();
        let expected: Vec<&str> = ["study_id", "facility_id", "month_index"]
            .into_iter()
            .chain(metas.iter().map(|(n, _)| n.as_str()))
            .collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(csv_err(
                features_path,
                1,
                "header does not match schema".into(),
            ));
        }
        let mut keys = Vec::new();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); metas.len()];
        for (i, rec) in r.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| csv_err(features_path, row, e.to_string()))?;
            let month_index = rec[2].parse().map_err(|_| {
                csv_err(features_path, row, format!("bad month_index {:?}", &rec[2]))
            })?;
            keys.push(RowKey {
                study_id: rec[0].to_string(),
                facility_id: rec[1].to_string(),
                month_index,
            });
            for (j, col) in raw.iter_mut().enumerate() {
                col.push(rec[j + 3].to_string());
            }
        }
        let mut columns = Vec::with_capacity(metas.len());
        for ((name, meta), vals) in metas.into_iter().zip(raw) {
            let col = if meta.kind == ColumnKind::Categorical {
                let labels: Vec<Option<&str>> = vals
                    .iter()
                    .map(|v| (!v.is_empty()).then_some(v.as_str()))
                    .collect();
                let mut c = Column::categorical(name, meta.level, &labels);
                c.meta = meta;
                c
            } else {
                let mut values = Vec::with_capacity(vals.len());
                for (i, v) in vals.iter().enumerate() {
                    values.push(if v.is_empty() {
                        MISSING
                    } else {
                        v.parse::<f64>().map_err(|_| {
                            csv_err(features_path, i + 2, format!("bad value {v:?} in {name}"))
                        })?
                    });
                }
                Column {
                    name,
                    meta,
                    values,
                    levels: Vec::new(),
                    rungs: None,
                }
            };
            columns.push(col);
        }
        FeatureMatrix::new(keys, columns)
    }
}

impl Column {
    pub(crate) fn clone_meta(&self) -> Column {
        Column {
            name: self.name.clone(),
            meta: self.meta.clone(),
            values: Vec::new(),
            levels: self.levels.clone(),
            rungs: None,
        }
    }
}

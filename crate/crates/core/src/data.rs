//! Long-format longitudinal datasets.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub holdout_times: Vec<f64>,
    #[serde(default)]
    pub holdout_values: Vec<f64>,
    /// True cluster label when known (simulated data).
    #[serde(default)]
    pub label: Option<String>,
}

impl Subject {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            times,
            values,
            holdout_times: Vec::new(),
            holdout_values: Vec::new(),
            label: None,
        }
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
}

#[derive(Debug, Deserialize)]
struct Row {
    subject_id: String,
    t: f64,
    y: f64,
    holdout_flag: u8,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let data = Self { subjects };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.subjects {
            if s.times.is_empty() {
                return Err(Error::contract(format!("subject {} has no observations", s.id)));
            }
            if s.times.len() != s.values.len() || s.holdout_times.len() != s.holdout_values.len() {
                return Err(Error::contract(format!("subject {} has mismatched lengths", s.id)));
            }
            let all = s
                .times
                .iter()
                .chain(&s.values)
                .chain(&s.holdout_times)
                .chain(&s.holdout_values);
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("subject {} has non-finite entries", s.id)));
            }
            if s.holdout_times.iter().any(|h| s.times.contains(h)) {
                return Err(Error::contract(format!(
                    "subject {} has a held-out time that is also observed",
                    s.id
                )));
            }
        }
        let mut ids: Vec<&str> = self.subjects.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("duplicate subject ids"));
        }
        Ok(())
    }

    pub fn has_holdouts(&self) -> bool {
        self.subjects.iter().any(|s| !s.holdout_times.is_empty())
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }

    /// Observed and held-out times of every subject.
    pub fn all_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().chain(&s.holdout_times).copied())
    }

    pub fn find(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn labels(&self) -> Option<Vec<String>> {
        self.subjects.iter().map(|s| s.label.clone()).collect()
    }

    /// Reads `subject_id,t,y,holdout_flag`. Subjects keep first-appearance
    /// order, points keep file order.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["subject_id", "t", "y", "holdout_flag"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut subjects: Vec<Subject> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(line, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let row: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if !row.t.is_finite() || !row.y.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: "non-finite value".into(),
                });
            }
            if row.holdout_flag > 1 {
                return Err(Error::Parse {
                    line,
                    message: "holdout_flag must be 0 or 1".into(),
                });
            }
            let k = *index.entry(row.subject_id.clone()).or_insert_with(|| {
                subjects.push(Subject::new(row.subject_id.clone(), Vec::new(), Vec::new()));
                subjects.len() - 1
            });
            let s = &mut subjects[k];
            if row.holdout_flag == 1 {
                s.holdout_times.push(row.t);
                s.holdout_values.push(row.y);
            } else {
                s.times.push(row.t);
                s.values.push(row.y);
            }
        }
        Self::new(subjects)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject_id", "t", "y", "holdout_flag"])?;
        for s in &self.subjects {
            for (t, y) in s.times.iter().zip(&s.values) {
                w.write_record([s.id.as_str(), &fmt_f64(*t), &fmt_f64(*y), "0"])?;
            }
            for (t, y) in s.holdout_times.iter().zip(&s.holdout_values) {
                w.write_record([s.id.as_str(), &fmt_f64(*t), &fmt_f64(*y), "1"])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_csv_writer(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

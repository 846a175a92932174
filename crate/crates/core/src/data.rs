//! Partly interval-censored survival data with longitudinal records.
//!
//! The on-disk format is a long table, one row per sampling interval:
//!
//! ```text
//! id,start,end,status,z1..zq[,x1..xp][,w1..wpz]
//! ```
//!
//! Rows with `status = 0` contribute a longitudinal record observed at their
//! `start` time. The single row with `status = 1` carries the event interval
//! `[start, end]`; its `z` values are not used as an observation. `end = inf`
//! (any case) or an empty `end` marks right censoring. A subject without a
//! status-1 row is right-censored at the `end` of its last row.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensoringStatus {
    Exact,
    Left,
    Right,
    Interval,
}

impl CensoringStatus {
    /// Classifies an event interval. Left censoring requires `t_left == 0`
    /// exactly.
    pub fn classify(t_left: f64, t_right: f64) -> Result<Self> {
        if !(t_left >= 0.0) || t_left.is_infinite() || t_right.is_nan() {
            return Err(Error::Validation(format!("invalid event interval [{t_left}, {t_right}]")));
        }
        if t_right < t_left {
            return Err(Error::Validation(format!("event interval [{t_left}, {t_right}] is reversed")));
        }
        Ok(if t_right.is_infinite() {
            CensoringStatus::Right
        } else if t_left == t_right {
            CensoringStatus::Exact
        } else if t_left == 0.0 {
            CensoringStatus::Left
        } else {
            CensoringStatus::Interval
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub t_left: f64,
    /// `f64::INFINITY` for right-censored subjects.
    pub t_right: f64,
    pub status: CensoringStatus,
    /// Covariates entering the Cox predictor.
    pub x: Vec<f64>,
    /// Baseline covariates available to the longitudinal fixed design.
    pub w: Vec<f64>,
    pub longitudinal: Vec<LongRecord>,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        t_left: f64,
        t_right: f64,
        x: Vec<f64>,
        w: Vec<f64>,
        longitudinal: Vec<LongRecord>,
    ) -> Result<Self> {
        let status = CensoringStatus::classify(t_left, t_right)?;
        Ok(Self { id: id.into(), t_left, t_right, status, x, w, longitudinal })
    }

    /// Largest finite endpoint of the event interval.
    pub fn last_finite_time(&self) -> f64 {
        if self.t_right.is_finite() {
            self.t_right
        } else {
            self.t_left
        }
    }

    pub fn is_right_censored(&self) -> bool {
        self.status == CensoringStatus::Right
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub p: usize,
    pub q: usize,
    pub pw: usize,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub w_names: Vec<String>,
}

/// Column names selecting the covariate blocks of a long CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub z: Vec<String>,
    pub x: Vec<String>,
    pub w: Vec<String>,
}

impl CsvSchema {
    /// `z*`, `x*` and `w*` columns in header order.
    pub fn from_header(header: &[String]) -> Self {
        let pick = |prefix: char| {
            header
                .iter()
                .filter(|h| {
                    h.starts_with(prefix) && h.len() > 1 && h[1..].chars().all(|c| c.is_ascii_digit())
                })
                .cloned()
                .collect::<Vec<_>>()
        };
        Self { z: pick('z'), x: pick('x'), w: pick('w') }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub subject: Option<String>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(id) => write!(f, "subject {id}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>, x_names: Vec<String>, z_names: Vec<String>, w_names: Vec<String>) -> Self {
        Self { p: x_names.len(), q: z_names.len(), pw: w_names.len(), subjects, x_names, z_names, w_names }
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Number of subjects that are not right-censored.
    pub fn n0(&self) -> usize {
        self.subjects.iter().filter(|s| !s.is_right_censored()).count()
    }

    /// Total count of scalar longitudinal measurements.
    pub fn n_measurements(&self) -> usize {
        self.subjects.iter().map(|s| s.longitudinal.len()).sum::<usize>() * self.q
    }

    /// Every finite endpoint of every event interval.
    pub fn finite_endpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.n());
        for s in &self.subjects {
            out.push(s.t_left);
            if s.t_right.is_finite() && s.t_right != s.t_left {
                out.push(s.t_right);
            }
        }
        out
    }

    pub fn longitudinal_times(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.longitudinal.iter().map(|r| r.time)).collect()
    }

    pub fn status_counts(&self) -> BTreeMap<CensoringStatus, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.subjects {
            *counts.entry(s.status).or_insert(0) += 1;
        }
        counts
    }

    pub fn validate(&self) -> ValidationReport {
        let mut findings = Vec::new();
        let mut push = |subject: Option<&str>, message: String| {
            findings.push(Finding { subject: subject.map(str::to_owned), message })
        };
        if self.subjects.is_empty() {
            push(None, "dataset has no subjects".into());
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            let id = Some(s.id.as_str());
            if !seen.insert(s.id.as_str()) {
                push(id, "duplicate subject id".into());
            }
            match CensoringStatus::classify(s.t_left, s.t_right) {
                Ok(st) if st == s.status => {}
                Ok(st) => push(id, format!("status {:?} inconsistent with endpoints (expected {st:?})", s.status)),
                Err(e) => push(id, e.to_string()),
            }
            if s.x.len() != self.p {
                push(id, format!("expected {} Cox covariates, found {}", self.p, s.x.len()));
            }
            if s.w.len() != self.pw {
                push(id, format!("expected {} baseline covariates, found {}", self.pw, s.w.len()));
            }
            if s.x.iter().chain(&s.w).any(|v| !v.is_finite()) {
                push(id, "non-finite covariate value".into());
            }
            if s.longitudinal.windows(2).any(|w| w[1].time <= w[0].time) {
                push(id, "longitudinal times are not strictly increasing".into());
            }
            let horizon = s.last_finite_time();
            for r in &s.longitudinal {
                if !(r.time >= 0.0) || !r.time.is_finite() {
                    push(id, format!("invalid longitudinal time {}", r.time));
                } else if r.time > horizon {
                    push(id, format!("longitudinal time {} beyond the event interval end {horizon}", r.time));
                }
                if r.values.len() != self.q {
                    push(id, format!("expected {} longitudinal values, found {}", self.q, r.values.len()));
                } else if r.values.iter().any(|v| !v.is_finite()) {
                    push(id, format!("non-finite longitudinal value at time {}", r.time));
                }
            }
        }
        ValidationReport { findings }
    }

    /// Replaces interval and left censoring by exact times at the interval
    /// midpoint. Right-censored subjects are unchanged.
    pub fn midpoint_impute(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.subjects {
            match s.status {
                CensoringStatus::Interval | CensoringStatus::Left => {
                    let mid = 0.5 * (s.t_left + s.t_right);
                    s.t_left = mid;
                    s.t_right = mid;
                    s.status = CensoringStatus::Exact;
                    s.longitudinal.retain(|r| r.time <= mid);
                }
                _ => {}
            }
        }
        out
    }

    pub fn read_csv(path: impl AsRef<Path>, schema: Option<&CsvSchema>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::parse_csv(file, schema)
    }

    pub fn parse_csv<R: Read>(reader: R, schema: Option<&CsvSchema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse { row: 1, msg: format!("missing column `{name}`") })
        };
        let (c_id, c_start, c_end, c_status) = (col("id")?, col("start")?, col("end")?, col("status")?);
        let schema = schema.cloned().unwrap_or_else(|| CsvSchema::from_header(&header));
        let cols = |names: &[String]| names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>();
        let (cz, cx, cw) = (cols(&schema.z)?, cols(&schema.x)?, cols(&schema.w)?);

        struct Pending {
            first_row: usize,
            rows: Vec<(usize, f64, f64, u8, Vec<f64>)>,
            x: Vec<f64>,
            w: Vec<f64>,
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Pending> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let num = |c: usize, what: &str| -> Result<f64> {
                let s = field(c);
                s.parse::<f64>()
                    .map_err(|_| Error::Parse { row, msg: format!("cannot parse {what} `{s}`") })
            };
            let id = field(c_id).to_owned();
            let start = num(c_start, "start")?;
            let end_raw = field(c_end);
            let end = if end_raw.is_empty() || end_raw.eq_ignore_ascii_case("inf") {
                f64::INFINITY
            } else {
                num(c_end, "end")?
            };
            let status = match field(c_status) {
                "0" => 0u8,
                "1" => 1u8,
                other => return Err(Error::Parse { row, msg: format!("unknown status code `{other}`") }),
            };
            if !(start >= 0.0) || start.is_infinite() {
                return Err(Error::Parse { row, msg: format!("invalid start time {start}") });
            }
            if end < start {
                return Err(Error::Parse { row, msg: format!("end {end} precedes start {start}") });
            }
            let z = cz.iter().map(|&c| num(c, "longitudinal value")).collect::<Result<Vec<_>>>()?;
            let x = cx.iter().map(|&c| num(c, "covariate")).collect::<Result<Vec<_>>>()?;
            let w = cw.iter().map(|&c| num(c, "baseline covariate")).collect::<Result<Vec<_>>>()?;
            let entry = groups.entry(id.clone()).or_insert_with(|| {
                order.push(id.clone());
                Pending { first_row: row, rows: Vec::new(), x: x.clone(), w: w.clone() }
            });
            if entry.x != x || entry.w != w {
                return Err(Error::Parse { row, msg: format!("time-fixed covariates change within id `{id}`") });
            }
            entry.rows.push((row, start, end, status, z));
        }

        let mut subjects = Vec::with_capacity(order.len());
        let mut non_monotone = Vec::new();
        for id in order {
            let g = groups.remove(&id).unwrap();
            let terminal: Vec<_> = g.rows.iter().filter(|r| r.3 == 1).collect();
            if terminal.len() > 1 {
                return Err(Error::Parse {
                    row: terminal[1].0,
                    msg: format!("id `{id}` has more than one status-1 row"),
                });
            }
            let (t_left, t_right) = match terminal.first() {
                Some(r) => (r.1, r.2),
                None => {
                    let last = g.rows.last().unwrap();
                    if last.2.is_infinite() {
                        (last.1, f64::INFINITY)
                    } else {
                        (last.2, f64::INFINITY)
                    }
                }
            };
            let longitudinal: Vec<LongRecord> = g
                .rows
                .iter()
                .filter(|r| r.3 == 0 && !(terminal.is_empty() && r.2.is_infinite()))
                .map(|r| LongRecord { time: r.1, values: r.4.clone() })
                .collect();
            if longitudinal.windows(2).any(|w| w[1].time <= w[0].time) {
                non_monotone.push(id.clone());
                continue;
            }
            let subject = Subject::new(id.clone(), t_left, t_right, g.x, g.w, longitudinal)
                .map_err(|e| Error::Parse { row: g.first_row, msg: format!("id `{id}`: {e}") })?;
            subjects.push(subject);
        }
        if !non_monotone.is_empty() {
            return Err(Error::Validation(format!(
                "non-monotone longitudinal times for ids: {}",
                non_monotone.join(", ")
            )));
        }
        Ok(Dataset::new(subjects, schema.x, schema.z, schema.w))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_owned(), "start".into(), "end".into(), "status".into()];
        header.extend(self.z_names.iter().cloned());
        header.extend(self.x_names.iter().cloned());
        header.extend(self.w_names.iter().cloned());
        wtr.write_record(&header)?;
        let fmt_end = |t: f64| if t.is_infinite() { "inf".to_owned() } else { format!("{t:?}") };
        for s in &self.subjects {
            let fixed: Vec<String> = s.x.iter().chain(&s.w).map(|v| format!("{v:?}")).collect();
            let recs = &s.longitudinal;
            for (a, r) in recs.iter().enumerate() {
                let end = recs.get(a + 1).map(|n| n.time).unwrap_or(s.t_left.max(r.time));
                let mut row = vec![s.id.clone(), format!("{:?}", r.time), format!("{end:?}"), "0".into()];
                row.extend(r.values.iter().map(|v| format!("{v:?}")));
                row.extend(fixed.iter().cloned());
                wtr.write_record(&row)?;
            }
            let last_z: Vec<f64> = recs.last().map(|r| r.values.clone()).unwrap_or_else(|| vec![0.0; self.q]);
            let mut row = vec![s.id.clone(), format!("{:?}", s.t_left), fmt_end(s.t_right), "1".into()];
            row.extend(last_z.iter().map(|v| format!("{v:?}")));
            row.extend(fixed.iter().cloned());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        Dataset::parse_csv(text.as_bytes(), None)
    }

    #[test]
    fn classify_statuses() {
        assert_eq!(CensoringStatus::classify(2.0, 2.0).unwrap(), CensoringStatus::Exact);
        assert_eq!(CensoringStatus::classify(0.0, 4.0).unwrap(), CensoringStatus::Left);
        assert_eq!(CensoringStatus::classify(5.0, f64::INFINITY).unwrap(), CensoringStatus::Right);
        assert_eq!(CensoringStatus::classify(1.0, 4.0).unwrap(), CensoringStatus::Interval);
        // left censoring needs an exact zero
        assert_eq!(CensoringStatus::classify(1e-300, 4.0).unwrap(), CensoringStatus::Interval);
        assert!(CensoringStatus::classify(4.0, 1.0).is_err());
    }

    #[test]
    fn interval_subject_with_three_samples() {
        let ds = parse(
            "id,start,end,status,z1\n\
             2,0,0.5,0,1.0\n\
             2,0.5,0.9,0,1.1\n\
             2,0.9,1.3,0,1.2\n\
             2,1.3,2.0,1,1.25\n",
        )
        .unwrap();
        let s = &ds.subjects[0];
        assert_eq!(s.longitudinal.len(), 3);
        assert_eq!(s.status, CensoringStatus::Interval);
        assert_eq!((s.t_left, s.t_right), (1.3, 2.0));
        assert_eq!(s.longitudinal[2].time, 0.9);
    }

    #[test]
    fn right_censoring_sentinel() {
        let ds = parse("id,start,end,status,z1\na,0,5,0,0.3\na,5,inf,1,0.3\n").unwrap();
        let s = &ds.subjects[0];
        assert_eq!(s.status, CensoringStatus::Right);
        assert_eq!(s.t_left, 5.0);
        assert_eq!(s.longitudinal.len(), 1);
        let ds = parse("id,start,end,status,z1\na,0,5,0,0.3\na,5,,1,0.3\n").unwrap();
        assert_eq!(ds.subjects[0].status, CensoringStatus::Right);
        // no terminal row: right-censored at the last end
        let ds = parse("id,start,end,status,z1\na,0,2,0,0.3\na,2,5,0,0.4\n").unwrap();
        assert_eq!(ds.subjects[0].t_left, 5.0);
        assert_eq!(ds.subjects[0].status, CensoringStatus::Right);
    }

    #[test]
    fn row_errors_name_the_row() {
        let err = parse("id,start,end,status,z1\na,0,1,0,0.3\na,3,2,1,0.3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
        let err = parse("id,start,end,status,z1\na,0,1,7,0.3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = parse("id,start,end,status,z1\na,1,2,0,0.3\na,0.5,1,0,0.3\na,2,3,1,0\nb,0,1,0,1\n").unwrap_err();
        assert!(err.to_string().contains("a"), "{err}");
    }

    #[test]
    fn validate_findings() {
        let rec = |t: f64, v: Vec<f64>| LongRecord { time: t, values: v };
        let good = Subject::new("a", 1.0, 2.0, vec![0.0], vec![], vec![rec(0.0, vec![1.0])]).unwrap();
        let late = Subject::new("b", 1.0, 2.0, vec![0.0], vec![], vec![rec(3.0, vec![1.0])]).unwrap();
        let ds = Dataset::new(vec![good.clone(), late], vec!["x1".into()], vec!["z1".into()], vec![]);
        assert_eq!(ds.validate().findings.len(), 1);
        let wide = Subject::new("c", 1.0, 2.0, vec![0.0], vec![], vec![rec(0.5, vec![1.0, 2.0])]).unwrap();
        let ds = Dataset::new(vec![good, wide], vec!["x1".into()], vec!["z1".into()], vec![]);
        assert_eq!(ds.validate().findings.len(), 1);
    }

    #[test]
    fn midpoint_rules() {
        let mk = |l: f64, r: f64| Subject::new("s", l, r, vec![], vec![], vec![]).unwrap();
        let ds = Dataset::new(vec![mk(2.0, 4.0), mk(0.0, 4.0), mk(5.0, f64::INFINITY)], vec![], vec![], vec![]);
        let imp = ds.midpoint_impute();
        assert_eq!((imp.subjects[0].t_left, imp.subjects[0].status), (3.0, CensoringStatus::Exact));
        assert_eq!((imp.subjects[1].t_right, imp.subjects[1].status), (2.0, CensoringStatus::Exact));
        assert_eq!(imp.subjects[2], ds.subjects[2]);
        assert_eq!(ds.n0(), 2);
    }
}

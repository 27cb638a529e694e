//! Long-format CSV input and the tabular outputs.
//!
//! Floats are written with 17 significant digits so that files round-trip
//! bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inference::BandResult;
use crate::model::{CoefficientMatrix, LongitudinalDataset, SubjectRecord, TimeGrid};
use crate::selection::PathResult;
use crate::simulation::ExperimentRow;
use crate::transform::{clr_transform, DEFAULT_PSEUDOCOUNT};

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    pub subject: String,
    pub time: String,
    pub response: String,
    pub covariates: Vec<String>,
    /// Prepend a constant column named `intercept`.
    pub add_intercept: bool,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self {
            subject: "subject_id".into(),
            time: "time".into(),
            response: "response".into(),
            covariates: Vec::new(),
            add_intercept: false,
        }
    }
}

impl ColumnRoles {
    /// Names of the design columns in order.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.add_intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(self.covariates.iter().cloned());
        names
    }
}

/// Centered log-ratio preprocessing of a block of count columns, applied row
/// by row before the roles are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClrOptions {
    pub columns: Vec<String>,
    #[serde(default = "default_pseudocount")]
    pub pseudocount: f64,
}

fn default_pseudocount() -> f64 {
    DEFAULT_PSEUDOCOUNT
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn column(headers: &HashMap<String, usize>, name: &str) -> Result<usize> {
    headers
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("unknown column '{name}'")))
}

pub fn read_long_csv(path: impl AsRef<Path>, roles: &ColumnRoles, clr: Option<&ClrOptions>) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.as_ref().display())))?;
    read_long_csv_from(file, roles, clr)
}

/// Reads one row per observation. Subjects keep their order of first
/// appearance and each subject's rows are sorted by time.
pub fn read_long_csv_from<R: Read>(reader: R, roles: &ColumnRoles, clr: Option<&ClrOptions>) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header_row = rdr.headers()?.clone();
    let mut headers = HashMap::new();
    for (k, h) in header_row.iter().enumerate() {
        if headers.insert(h.trim().to_string(), k).is_some() {
            return invalid(format!("duplicate column '{}'", h.trim()));
        }
    }
    let c_subject = column(&headers, &roles.subject)?;
    let c_time = column(&headers, &roles.time)?;
    let c_response = column(&headers, &roles.response)?;
    let c_cov = roles
        .covariates
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let c_clr = match clr {
        Some(o) => {
            if o.columns.is_empty() {
                return invalid("clr needs at least one count column");
            }
            o.columns.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    if roles.covariates.is_empty() && !roles.add_intercept {
        return invalid("no covariates given");
    }

    struct Row {
        subject: String,
        line: u64,
        values: Vec<f64>,
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<f64> {
            let raw = record.get(k).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::InvalidInput(format!("line {line}: column '{}': cannot parse '{raw}' as a number", &header_row[k]))
            })?;
            if !v.is_finite() {
                return invalid(format!("line {line}: column '{}': non-finite value '{raw}'", &header_row[k]));
            }
            Ok(v)
        };
        let subject = record.get(c_subject).unwrap_or("").trim().to_string();
        if subject.is_empty() {
            return invalid(format!("line {line}: empty subject id"));
        }
        let mut values = vec![field(c_time)?, field(c_response)?];
        for &k in &c_cov {
            values.push(field(k)?);
        }
        for &k in &c_clr {
            values.push(field(k)?);
        }
        rows.push(Row { subject, line, values });
    }
    if rows.is_empty() {
        return invalid("input has no data rows");
    }

    // Column positions inside `values`.
    let n_cov = c_cov.len();
    if let Some(o) = clr {
        let counts = DMatrix::from_fn(rows.len(), c_clr.len(), |r, k| rows[r].values[2 + n_cov + k]);
        let transformed = clr_transform(&counts, o.pseudocount)?;
        let mut target = HashMap::new();
        target.insert(c_response, 1);
        for (k, &c) in c_cov.iter().enumerate() {
            target.insert(c, 2 + k);
        }
        for (k, &c) in c_clr.iter().enumerate() {
            if let Some(&pos) = target.get(&c) {
                for (r, row) in rows.iter_mut().enumerate() {
                    row.values[pos] = transformed[(r, k)];
                }
            }
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, Vec<usize>> = HashMap::new();
    for (r, row) in rows.iter().enumerate() {
        by_subject
            .entry(row.subject.clone())
            .or_insert_with(|| {
                order.push(row.subject.clone());
                Vec::new()
            })
            .push(r);
    }
    let p = n_cov + usize::from(roles.add_intercept);
    let offset = usize::from(roles.add_intercept);
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut idx = by_subject.remove(&id).expect("subject was recorded");
        idx.sort_by(|&a, &b| rows[a].values[0].total_cmp(&rows[b].values[0]));
        for w in idx.windows(2) {
            if rows[w[0]].values[0] == rows[w[1]].values[0] {
                return invalid(format!(
                    "line {}: subject '{id}' has two observations at time {}",
                    rows[w[1]].line, rows[w[1]].values[0]
                ));
            }
        }
        let times = idx.iter().map(|&r| rows[r].values[0]).collect();
        let responses = idx.iter().map(|&r| rows[r].values[1]).collect();
        let design = DMatrix::from_fn(idx.len(), p, |n, j| {
            if j < offset {
                1.0
            } else {
                rows[idx[n]].values[2 + j - offset]
            }
        });
        subjects.push(SubjectRecord::new(id, times, responses, design)?);
    }
    LongitudinalDataset::new(subjects, roles.design_names())
}

fn writer(path: impl AsRef<Path>) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

/// Same layout `read_long_csv` expects with default roles.
pub fn write_dataset(path: impl AsRef<Path>, dataset: &LongitudinalDataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["subject_id".to_string(), "time".into(), "response".into()];
    header.extend(dataset.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for s in dataset.subjects() {
        for n in 0..s.n_obs() {
            let mut rec = vec![s.id().to_string(), fmt_f64(s.times()[n]), fmt_f64(s.responses()[n])];
            rec.extend(s.design().row(n).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    finish(w)
}

/// Tidy `(covariate, grid_time, value)` rows of a `p x S` matrix.
pub fn write_truth(path: impl AsRef<Path>, grid: &TimeGrid, values: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["covariate", "grid_time", "value"])?;
    for (j, name) in names.iter().enumerate() {
        for (s, &t) in grid.points().iter().enumerate() {
            w.write_record([name.clone(), fmt_f64(t), fmt_f64(values[(j, s)])])?;
        }
    }
    finish(w)
}

pub fn write_coefficients(path: impl AsRef<Path>, coefficients: &CoefficientMatrix, names: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["covariate", "grid_time", "estimate", "is_zero"])?;
    for (j, name) in names.iter().enumerate() {
        for (s, &t) in coefficients.grid().points().iter().enumerate() {
            let v = coefficients.values()[(j, s)];
            w.write_record([name.clone(), fmt_f64(t), fmt_f64(v), (v == 0.0).to_string()])?;
        }
    }
    finish(w)
}

pub fn write_path(path: impl AsRef<Path>, result: &PathResult) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["h", "lambda", "df", "ebic", "selected"])?;
    for (k, e) in result.entries.iter().enumerate() {
        w.write_record([
            fmt_f64(e.h),
            fmt_f64(e.lambda),
            e.df.to_string(),
            fmt_f64(e.ebic),
            (k == result.selected).to_string(),
        ])?;
    }
    finish(w)
}

pub fn write_bands(path: impl AsRef<Path>, bands: &BandResult, grid: &TimeGrid, names: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["covariate", "grid_time", "estimate", "lower", "upper", "excludes_zero"])?;
    for (j, name) in names.iter().enumerate() {
        for (s, &t) in grid.points().iter().enumerate() {
            w.write_record([
                name.clone(),
                fmt_f64(t),
                fmt_f64(bands.estimate[(j, s)]),
                fmt_f64(bands.lower[(j, s)]),
                fmt_f64(bands.upper[(j, s)]),
                bands.excludes_zero(j, s).to_string(),
            ])?;
        }
    }
    finish(w)
}

pub fn write_pvalues(path: impl AsRef<Path>, bands: &BandResult, names: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["covariate", "p_value", "multiplier"])?;
    for (j, name) in names.iter().enumerate() {
        w.write_record([name.clone(), fmt_f64(bands.p_values[j]), fmt_f64(bands.multipliers[j])])?;
    }
    finish(w)
}

/// One row per (method, setting, replicate).
pub fn write_experiment(path: impl AsRef<Path>, rows: &[ExperimentRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["method", "axis", "value", "replicate", "seed", "mae", "accuracy", "tpr", "fdr", "error"])?;
    for r in rows {
        let m = |f: fn(&crate::simulation::Metrics) -> f64| r.metrics.as_ref().map_or(String::new(), |x| fmt_f64(f(x)));
        w.write_record([
            r.method.name().to_string(),
            r.axis.name().to_string(),
            fmt_f64(r.value),
            r.replicate.to_string(),
            r.seed.to_string(),
            m(|x| x.mae),
            m(|x| x.accuracy),
            m(|x| x.tpr),
            m(|x| x.fdr),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles() -> ColumnRoles {
        ColumnRoles {
            covariates: vec!["group".into()],
            add_intercept: true,
            ..ColumnRoles::default()
        }
    }

    #[test]
    fn parses_and_sorts() {
        let csv = "subject_id,time,response,group\nb,1,2.5,1\na,0.5,1,0\nb,0,3,1\n";
        let d = read_long_csv_from(csv.as_bytes(), &roles(), None).unwrap();
        assert_eq!(d.covariate_names(), &["intercept".to_string(), "group".to_string()]);
        let b = &d.subjects()[0];
        assert_eq!(b.id(), "b");
        assert_eq!(b.times(), &[0.0, 1.0]);
        assert_eq!(b.responses().as_slice(), &[3.0, 2.5]);
        assert_eq!(b.design()[(0, 0)], 1.0);
        assert_eq!(b.design()[(1, 1)], 1.0);
    }

    #[test]
    fn errors_name_line_and_column() {
        let bad = "subject_id,time,response,group\na,0,1,0\na,1,oops,0\n";
        let e = read_long_csv_from(bad.as_bytes(), &roles(), None).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("response"), "{e}");
        let nan = "subject_id,time,response,group\na,0,NaN,0\n";
        assert!(read_long_csv_from(nan.as_bytes(), &roles(), None).is_err());
        let r = ColumnRoles { covariates: vec!["nope".into()], ..roles() };
        let e = read_long_csv_from(bad.as_bytes(), &r, None).unwrap_err();
        assert!(e.is_input_error());
        assert!(e.to_string().contains("'nope'"));
        let dup = "subject_id,time,response,group\na,0,1,0\na,0,2,0\n";
        assert!(read_long_csv_from(dup.as_bytes(), &roles(), None).is_err());
    }

    #[test]
    fn clr_replaces_selected_columns() {
        let csv = "subject_id,time,response,group,other\na,0,3,1,1\na,1,0,1,9\n";
        let clr = ClrOptions { columns: vec!["response".into(), "other".into()], pseudocount: 0.5 };
        let d = read_long_csv_from(csv.as_bytes(), &roles(), Some(&clr)).unwrap();
        let y = d.subjects()[0].responses();
        let expect0 = 3.5f64.ln() - (3.5f64.ln() + 1.5f64.ln()) / 2.0;
        assert!((y[0] - expect0).abs() < 1e-14);
        assert!(y[1] < 0.0);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123456789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}

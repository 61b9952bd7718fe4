//! File formats: CSV tables, JSON documents and episode traces.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{CorrelationPattern, EpisodeRecord};
use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::net::AblationMask;
use crate::numerics::Matrix;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_error(path: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

pub fn write_csv<S: AsRef<str>>(path: &Path, headers: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(headers.iter().map(AsRef::as_ref)).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Rows of a CSV file with the 1-based line each row came from.
pub struct CsvTable {
    pub path: PathBuf,
    pub headers: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => parse_error(path, 1, 1, format!("{other:?}")),
            }
        })?;
        let headers = rdr
            .headers()
            .map_err(|e| parse_error(path, 1, 1, e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                match e.kind() {
                    csv::ErrorKind::UnequalLengths { expected_len, len, .. } => parse_error(
                        path,
                        line,
                        (*len.min(expected_len) + 1) as usize,
                        format!("expected {expected_len} fields, found {len}"),
                    ),
                    _ => parse_error(path, line, 1, e.to_string()),
                }
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            rows.push((line, rec.iter().map(str::to_owned).collect()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(&self.path, 1, 1, format!("missing column '{name}'")))
    }

    /// Parses field `col` (0-based) of row `row` as a float.
    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        let (line, fields) = &self.rows[row];
        let s = fields[col].trim();
        s.parse::<f64>()
            .map_err(|_| parse_error(&self.path, *line, col + 1, format!("'{s}' is not a number")))
    }

    /// Like `f64_at` but an empty field is `None`.
    pub fn opt_f64_at(&self, row: usize, col: usize) -> Result<Option<f64>> {
        if self.rows[row].1[col].trim().is_empty() {
            Ok(None)
        } else {
            self.f64_at(row, col).map(Some)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e.column(), e.to_string()))
}

/// Sidecar describing a persisted episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub env: EnvId,
    pub seed: u64,
    pub mask: AblationMask,
    pub return_total: f64,
    pub steps: usize,
}

fn trace_paths(dir: &Path, stem: &str) -> [PathBuf; 4] {
    [
        dir.join(format!("{stem}_layer1.csv")),
        dir.join(format!("{stem}_layer2.csv")),
        dir.join(format!("{stem}_obs.csv")),
        dir.join(format!("{stem}.json")),
    ]
}

fn activation_rows(rec: &EpisodeRecord, m: &Matrix) -> Vec<Vec<String>> {
    (0..rec.len())
        .map(|t| {
            let mut row = Vec::with_capacity(3 + m.cols());
            row.push(t.to_string());
            row.push(fmt_f64(rec.actions[t]));
            row.push(fmt_f64(rec.rewards[t]));
            row.extend(m.row(t).iter().map(|&v| fmt_f64(v)));
            row
        })
        .collect()
}

/// Writes `{stem}_layer1.csv`, `{stem}_layer2.csv`, `{stem}_obs.csv` and
/// `{stem}.json` into `dir`.
pub fn write_trace(dir: &Path, stem: &str, rec: &EpisodeRecord) -> Result<()> {
    let [l1, l2, obs, meta] = trace_paths(dir, stem);
    for (path, m) in [(&l1, &rec.layer1), (&l2, &rec.layer2)] {
        let mut headers = vec!["t".to_owned(), "action".to_owned(), "reward".to_owned()];
        headers.extend((0..m.cols()).map(|u| format!("unit_{u:04}")));
        write_csv(path, &headers, &activation_rows(rec, m))?;
    }
    let mut headers = vec!["t".to_owned()];
    headers.extend((0..rec.observations.cols()).map(|j| format!("obs_{j}")));
    let rows: Vec<Vec<String>> = (0..rec.len())
        .map(|t| {
            std::iter::once(t.to_string())
                .chain(rec.observations.row(t).iter().map(|&v| fmt_f64(v)))
                .collect()
        })
        .collect();
    write_csv(&obs, &headers, &rows)?;
    write_json(
        &meta,
        &TraceMeta {
            env: rec.env_id,
            seed: rec.seed,
            mask: rec.mask,
            return_total: rec.return_total,
            steps: rec.len(),
        },
    )
}

/// One layer's activation trace as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `T × N`.
    pub activations: Matrix,
    /// From the `_obs.csv` sidecar when present.
    pub observations: Option<Matrix>,
    /// From the `.json` sidecar when present.
    pub meta: Option<TraceMeta>,
}

fn read_matrix(table: &CsvTable, first_col: usize) -> Result<Matrix> {
    let cols = table.headers.len() - first_col;
    let mut data = Vec::with_capacity(table.rows.len() * cols);
    for r in 0..table.rows.len() {
        for c in first_col..table.headers.len() {
            data.push(table.f64_at(r, c)?);
        }
    }
    Matrix::new(table.rows.len(), cols, data)
}

/// Reads a `*_layerN.csv` trace and, if they exist, its sibling
/// observation and metadata files.
pub fn read_trace(path: &Path) -> Result<LayerTrace> {
    let table = CsvTable::read(path)?;
    let expected = ["t", "action", "reward"];
    for (i, want) in expected.iter().enumerate() {
        if table.headers.get(i).map(String::as_str) != Some(*want) {
            return Err(parse_error(path, 1, i + 1, format!("expected header '{want}'")));
        }
    }
    if table.headers.len() <= expected.len() {
        return Err(parse_error(path, 1, 4, "trace has no unit columns"));
    }
    for (r, (line, fields)) in table.rows.iter().enumerate() {
        if fields[0].trim() != r.to_string() {
            return Err(parse_error(path, *line, 1, format!("expected t = {r}")));
        }
    }
    let actions = (0..table.rows.len()).map(|r| table.f64_at(r, 1)).collect::<Result<_>>()?;
    let rewards = (0..table.rows.len()).map(|r| table.f64_at(r, 2)).collect::<Result<_>>()?;
    let activations = read_matrix(&table, 3)?;

    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name
        .strip_suffix("_layer1.csv")
        .or_else(|| name.strip_suffix("_layer2.csv"));
    let dir = path.parent().unwrap_or(Path::new("."));
    let (observations, meta) = match stem {
        Some(stem) => {
            let [_, _, obs, meta] = trace_paths(dir, stem);
            let observations = if obs.exists() {
                let t = CsvTable::read(&obs)?;
                let m = read_matrix(&t, 1)?;
                if m.rows() != activations.rows() {
                    return Err(parse_error(&obs, 1, 1, "observation rows do not match the trace"));
                }
                Some(m)
            } else {
                None
            };
            let meta = if meta.exists() { Some(read_json(&meta)?) } else { None };
            (observations, meta)
        }
        None => (None, None),
    };
    Ok(LayerTrace {
        actions,
        rewards,
        activations,
        observations,
        meta,
    })
}

pub fn write_pattern(path: &Path, p: &CorrelationPattern) -> Result<()> {
    let rows: Vec<Vec<String>> = p
        .values
        .iter()
        .enumerate()
        .map(|(u, v)| match v {
            Some(r) => vec![u.to_string(), fmt_f64(*r), fmt_f64(r.abs()), "true".into()],
            None => vec![u.to_string(), String::new(), String::new(), "false".into()],
        })
        .collect();
    write_csv(path, &["unit", "r_signed", "r_abs", "present"], &rows)
}

/// Signed per-unit correlations of a pattern CSV; ablated units are `None`.
pub fn read_pattern(path: &Path) -> Result<Vec<Option<f64>>> {
    let t = CsvTable::read(path)?;
    let col = t.column("r_signed")?;
    (0..t.rows.len()).map(|r| t.opt_f64_at(r, col)).collect()
}

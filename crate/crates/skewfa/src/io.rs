//! Model serialization (versioned JSON) and CSV data ingestion/emission.
//!
//! Data CSVs are an RFC-4180 subset: UTF-8, '.' decimal separator. The
//! first row is treated as a header exactly when any of its cells fails to
//! parse as a number. A column whose header is `label` (case-insensitive)
//! is split off as ground-truth labels and never used as a feature.

use crate::error::{Error, Result};
use crate::model::{ComponentParams, Dims, Family, MixtureModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

pub const MODEL_FORMAT_VERSION: &str = "skewfa-v1";

/// On-disk model representation. Matrices are row-major flat arrays;
/// `nu` is null for the normal families. Serde's float formatting emits
/// the shortest decimal that round-trips, so parameters survive a
/// write/read cycle bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: String,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub g: usize,
    pub family: String,
    pub components: Vec<ComponentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub pi: f64,
    pub mu: Vec<f64>,
    /// p x q loading matrix, row-major.
    pub b: Vec<f64>,
    /// q x r skewness matrix, row-major.
    pub delta: Vec<f64>,
    pub d: Vec<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub bic: f64,
    pub icl: f64,
    pub seed: u64,
}

pub fn model_to_file(model: &MixtureModel, fit: Option<FitMeta>) -> ModelFile {
    let Dims { p, q, r } = model.dims;
    ModelFile {
        version: MODEL_FORMAT_VERSION.to_string(),
        p,
        q,
        r,
        g: model.g(),
        family: model.family.to_string(),
        components: model
            .components
            .iter()
            .map(|c| ComponentRecord {
                pi: c.pi,
                mu: c.mu.iter().copied().collect(),
                b: row_major(&c.loadings),
                delta: row_major(&c.skew),
                d: c.uniquenesses.iter().copied().collect(),
                nu: c.nu.is_finite().then_some(c.nu),
            })
            .collect(),
        fit,
    }
}

pub fn model_from_file(file: &ModelFile) -> Result<MixtureModel> {
    if file.version != MODEL_FORMAT_VERSION {
        return Err(Error::UnknownVersion {
            found: file.version.clone(),
            expected: MODEL_FORMAT_VERSION.to_string(),
        });
    }
    let family = Family::from_str(&file.family)?;
    let dims = Dims {
        p: file.p,
        q: file.q,
        r: file.r,
    };
    let r_eff = family.effective_r(file.r);
    let components = file
        .components
        .iter()
        .map(|rec| {
            if rec.mu.len() != file.p
                || rec.b.len() != file.p * file.q
                || rec.delta.len() != file.q * r_eff
                || rec.d.len() != file.p
            {
                return Err(Error::Dimension(
                    "component record shapes disagree with file dims".into(),
                ));
            }
            Ok(ComponentParams {
                pi: rec.pi,
                mu: DVector::from_vec(rec.mu.clone()),
                loadings: from_row_major(&rec.b, file.p, file.q),
                skew: from_row_major(&rec.delta, file.q, r_eff),
                uniquenesses: DVector::from_vec(rec.d.clone()),
                nu: rec.nu.unwrap_or(f64::INFINITY),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureModel::new(components, dims, family)
}

pub fn write_model(path: &Path, model: &MixtureModel, fit: Option<FitMeta>) -> Result<()> {
    let file = model_to_file(model, fit);
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(MixtureModel, Option<FitMeta>)> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    let model = model_from_file(&file)?;
    Ok((model, file.fit))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn from_row_major(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// A parsed numeric table: features, optional header names, and an optional
/// ground-truth label column (taken from a `label`-named header column).
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub features: DMatrix<f64>,
    pub header: Option<Vec<String>>,
    pub labels: Option<Vec<i64>>,
}

/// Reads a CSV file. Errors carry 1-based row/column coordinates.
pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            row: idx + 1,
            col: 0,
            reason: e.to_string(),
        })?;
        let cells: Vec<String> = rec.iter().map(|s| s.to_string()).collect();
        if !cells.is_empty() && !(cells.len() == 1 && cells[0].is_empty()) {
            records.push(cells);
        }
    }
    if records.is_empty() {
        return Err(Error::Csv {
            row: 1,
            col: 1,
            reason: "file contains no data".into(),
        });
    }

    // Header iff any first-row cell is non-numeric.
    let first_is_header = records[0].iter().any(|c| c.parse::<f64>().is_err());
    let (header, body_start) = if first_is_header {
        (Some(records[0].clone()), 1)
    } else {
        (None, 0)
    };
    if records.len() == body_start {
        return Err(Error::Csv {
            row: body_start,
            col: 1,
            reason: "file contains a header but no data rows".into(),
        });
    }

    let width = records[body_start].len();
    if let Some(h) = &header {
        if h.len() != width {
            return Err(Error::Csv {
                row: 2,
                col: width.min(h.len()) + 1,
                reason: format!("header has {} cells but data rows have {width}", h.len()),
            });
        }
    }

    let label_col = header.as_ref().and_then(|h| {
        h.iter()
            .position(|name| name.eq_ignore_ascii_case("label"))
    });

    let n = records.len() - body_start;
    let p = width - usize::from(label_col.is_some());
    if p == 0 {
        return Err(Error::Csv {
            row: 1,
            col: 1,
            reason: "no feature columns".into(),
        });
    }
    let mut features = DMatrix::zeros(n, p);
    let mut labels = label_col.map(|_| Vec::with_capacity(n));
    for (i, cells) in records[body_start..].iter().enumerate() {
        let row_no = body_start + i + 1;
        if cells.len() != width {
            return Err(Error::Csv {
                row: row_no,
                col: cells.len().min(width) + 1,
                reason: format!("ragged row: expected {width} cells, found {}", cells.len()),
            });
        }
        let mut feat_idx = 0;
        for (c, cell) in cells.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Csv {
                row: row_no,
                col: c + 1,
                reason: format!("non-numeric cell {cell:?}"),
            })?;
            if Some(c) == label_col {
                labels.as_mut().expect("labels").push(value.round() as i64);
            } else {
                features[(i, feat_idx)] = value;
                feat_idx += 1;
            }
        }
    }
    Ok(CsvTable {
        features,
        header,
        labels,
    })
}

/// Writes a matrix as CSV with the given header row.
pub fn write_csv(path: &Path, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header).map_err(csv_io)?;
    for i in 0..rows.nrows() {
        let rec: Vec<String> = (0..rows.ncols()).map(|j| fmt_float(rows[(i, j)])).collect();
        writer.write_record(&rec).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a matrix plus a trailing integer label column.
pub fn write_csv_labeled(
    path: &Path,
    header: &[String],
    rows: &DMatrix<f64>,
    labels: &[u32],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header).map_err(csv_io)?;
    for i in 0..rows.nrows() {
        let mut rec: Vec<String> = (0..rows.ncols()).map(|j| fmt_float(rows[(i, j)])).collect();
        rec.push(labels[i].to_string());
        writer.write_record(&rec).map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Csv {
        row: 0,
        col: 0,
        reason: e.to_string(),
    }
}

/// Shortest decimal representation that parses back to the same f64.
fn fmt_float(v: f64) -> String {
    let mut buf = ryu_like(v);
    if buf == "-0" {
        buf = "0".into();
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // serde_json's float path uses ryu; reuse it for CSV output too.
    serde_json::to_string(&v).unwrap_or_else(|_| format!("{v}"))
}

/// Reads a label vector: either a single column (with or without header)
/// or the `label` column of a wider file.
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let table = read_csv(path)?;
    if let Some(labels) = table.labels {
        return Ok(labels);
    }
    if table.features.ncols() != 1 {
        return Err(Error::Csv {
            row: 1,
            col: 1,
            reason: format!(
                "expected a single label column or a 'label' header; found {} columns",
                table.features.ncols()
            ),
        });
    }
    Ok(table
        .features
        .column(0)
        .iter()
        .map(|&v| v.round() as i64)
        .collect())
}

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::DomainDataset;

/// What to expect from a dataset CSV: a header row, feature columns, and
/// an integer label in the last column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvSchema {
    pub domain_id: String,
    /// Inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
    pub feature_count: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: feature column {column} is not finite")]
    NonFinite { line: u64, column: usize },
    #[error("line {line}: label {label} outside [0, {num_classes})")]
    LabelOutOfRange {
        line: u64,
        label: usize,
        num_classes: usize,
    },
    #[error("{0} has no data rows")]
    Empty(PathBuf),
}

/// Reads a dataset; rows keep their file order. Line numbers in errors
/// count the header as line 1.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CsvError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CsvError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(CsvError::Malformed {
                line,
                message: "need at least one feature and a label".into(),
            }
            .into());
        }
        let n_feat = rec.len() - 1;
        if let Some(want) = schema.feature_count {
            if want != n_feat {
                return Err(CsvError::Malformed {
                    line,
                    message: format!("expected {want} features, found {n_feat}"),
                }
                .into());
            }
        }
        let mut row = Vec::with_capacity(n_feat);
        for (column, cell) in rec.iter().take(n_feat).enumerate() {
            let v: f64 = cell.parse().map_err(|_| CsvError::Malformed {
                line,
                message: format!("feature column {column}: {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CsvError::NonFinite { line, column }.into());
            }
            row.push(v);
        }
        let cell = &rec[n_feat];
        let label: usize = cell.parse().map_err(|_| CsvError::Malformed {
            line,
            message: format!("label {cell:?} is not a non-negative integer"),
        })?;
        if let Some(c) = schema.num_classes {
            if label >= c {
                return Err(CsvError::LabelOutOfRange {
                    line,
                    label,
                    num_classes: c,
                }
                .into());
            }
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(CsvError::Empty(path.to_path_buf()).into());
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let features = Matrix::from_rows(&rows).map_err(|_| CsvError::Malformed {
        line: 0,
        message: "rows have differing column counts".into(),
    })?;
    DomainDataset::new(schema.domain_id.clone(), features, labels, num_classes)
}

/// Writes `f0,...,f{d-1},label` followed by one line per row. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv(path: impl AsRef<Path>, data: &DomainDataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for j in 0..data.feature_dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for i in 0..data.len() {
        for v in data.features().row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", data.labels()[i]));
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Row containers and on-disk interchange formats.
//!
//! Raw records come in as delimited text with a header row; fields stay
//! strings until the encoder interprets them against a schema. Encoded
//! datasets are dense `f64` matrices with ids, binary labels and optional
//! group keys, written as a small self-describing tab-separated format so
//! every pipeline stage (and external tooling) consumes identical bytes.

use crate::encode::GroupKey;
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// A parsed delimited file: header names plus string-valued rows.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Stable row ids: the `id` column when present, the 0-based row index
    /// otherwise.
    pub ids: Vec<u64>,
    pub labels: Vec<u8>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// Keep only the given row indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> RawTable {
        RawTable {
            headers: self.headers.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Read a CSV file with a header row. `label_column` must hold 0/1 values;
/// an `id` column, when present, supplies stable row ids.
pub fn read_csv(path: &Path, label_column: &str) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::data(format!("label column `{label_column}` not found")))?;
    let id_idx = headers.iter().position(|h| h == "id");

    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {i}: {e}")))?;
        let fields: Vec<String> = record.iter().map(|s| s.to_string()).collect();
        let label = match fields.get(label_idx).map(|s| s.as_str()) {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => {
                return Err(Error::data(format!(
                    "row {i}: label must be 0 or 1, got {other:?}"
                )))
            }
        };
        let id = match id_idx {
            Some(k) => fields[k]
                .parse::<u64>()
                .map_err(|_| Error::data(format!("row {i}: bad id `{}`", fields[k])))?,
            None => i as u64,
        };
        rows.push(fields);
        ids.push(id);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    Ok(RawTable {
        headers,
        rows,
        ids,
        labels,
    })
}

/// Write a raw table back out as CSV (used by the synthetic generator).
pub fn write_csv(path: &Path, table: &RawTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(&table.headers)
        .map_err(|e| Error::data(e.to_string()))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// An encoded dataset: dense feature matrix, ids, labels, optional group
/// keys and a free-form provenance note describing how the split was made.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub ids: Vec<u64>,
    pub width: usize,
    /// Row-major, `len() * width` values.
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub keys: Option<Vec<GroupKey>>,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(width: usize) -> Self {
        LabeledDataset {
            ids: Vec::new(),
            width,
            features: Vec::new(),
            labels: Vec::new(),
            keys: None,
            provenance: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn push_row(&mut self, id: u64, label: u8, features: &[f64]) {
        assert_eq!(features.len(), self.width);
        self.ids.push(id);
        self.labels.push(label);
        self.features.extend_from_slice(features);
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        let mut out = LabeledDataset::new(self.width);
        for &i in idx {
            out.push_row(self.ids[i], self.labels[i], self.row(i));
        }
        out.keys = self
            .keys
            .as_ref()
            .map(|keys| idx.iter().map(|&i| keys[i].clone()).collect());
        out.provenance = self.provenance.clone();
        out
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    /// Serialize as tab-separated text. Feature values use Rust's shortest
    /// round-trip float formatting, so reading the file back reproduces the
    /// exact bits.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# optideq-dataset v1\twidth={}\trows={}\tkeys={}",
            self.width,
            self.len(),
            if self.keys.is_some() { 1 } else { 0 }
        )?;
        if !self.provenance.is_empty() {
            writeln!(f, "# provenance\t{}", self.provenance)?;
        }
        for i in 0..self.len() {
            let key = match &self.keys {
                Some(keys) => keys[i].to_hex(),
                None => "-".to_string(),
            };
            write!(f, "{}\t{}\t{}\t", self.ids[i], self.labels[i], key)?;
            let row = self.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<LabeledDataset> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty dataset file"))??;
        let mut width = None;
        let mut has_keys = false;
        if !header.starts_with("# optideq-dataset v1") {
            return Err(Error::format("missing dataset header"));
        }
        for part in header.split('\t').skip(1) {
            if let Some(v) = part.strip_prefix("width=") {
                width = Some(v.parse::<usize>().map_err(|_| Error::format("bad width"))?);
            } else if let Some(v) = part.strip_prefix("keys=") {
                has_keys = v == "1";
            }
        }
        let width = width.ok_or_else(|| Error::format("dataset header lacks width"))?;
        let mut ds = LabeledDataset::new(width);
        if has_keys {
            ds.keys = Some(Vec::new());
        }
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# provenance\t") {
                ds.provenance = rest.to_string();
                continue;
            }
            let mut parts = line.splitn(4, '\t');
            let id: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("bad id field"))?;
            let label: u8 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format("bad label field"))?;
            let key_field = parts.next().ok_or_else(|| Error::format("missing key field"))?;
            let values = parts.next().ok_or_else(|| Error::format("missing features"))?;
            let feats: Vec<f64> = values
                .split(' ')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("bad feature value"))?;
            if feats.len() != width {
                return Err(Error::format(format!(
                    "row width {} does not match declared {width}",
                    feats.len()
                )));
            }
            ds.push_row(id, label, &feats);
            if let Some(keys) = &mut ds.keys {
                keys.push(GroupKey::from_hex(key_field)?);
            }
        }
        Ok(ds)
    }
}

//! Feature representations: raw (quantile + Ising) and 127-bit binarised.
//!
//! Three encoding modes share one fitted state:
//!
//! - `raw-ising` — continuous features quantile-scaled to be uniform on
//!   `[-1, +1]` over the training set, categoricals one-hot and binaries
//!   passed through, all mapped to spins via `s = 2x - 1`;
//! - `raw-onehot` — the digital-baseline variant: continuous standardised by
//!   training mean/std, one-hot and binary columns kept `{0, 1}`;
//! - `binarized` — continuous features quantile-binned and one-hot encoded,
//!   categoricals one-hot with a catch-all bucket, binaries passed through,
//!   every column spin-valued.
//!
//! The tanh recurrence needs the spin centring: sparse `{0, 1}` one-hot
//! inputs leave the input projection with too little variance. The centring
//! is therefore a first-class switch ([`Centring`]) so the degraded variant
//! can be produced for ablation runs without code changes.
//!
//! Fitting uses training rows only. The empirical CDF uses midpoint ranks
//! rescaled so the training minimum and maximum land exactly at the ends of
//! the interval; values outside the training range clip.

use crate::data::RawTable;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// What kind of column a feature is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Continuous,
    Categorical,
    Binary,
}

/// One feature declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Quantile bin count in binarised mode (continuous features).
    pub bins: usize,
    /// Vocabulary-size cap, excluding the catch-all bucket (categoricals).
    pub vocab: usize,
}

impl FeatureSpec {
    pub fn continuous(name: &str, bins: usize) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Continuous,
            bins,
            vocab: 0,
        }
    }

    pub fn categorical(name: &str, vocab: usize) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical,
            bins: 0,
            vocab,
        }
    }

    pub fn binary(name: &str) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Binary,
            bins: 0,
            vocab: 0,
        }
    }
}

/// Ordered feature declarations plus the label column name.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub label: String,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Self {
        FeatureSchema {
            features,
            label: "label".into(),
        }
    }

    /// The mortgage-disposition preset: 6 continuous + 7 categorical +
    /// 6 binary features. Continuous features use 11 quantile bins each
    /// (66 binarised columns); categorical vocabularies total 48, plus one
    /// catch-all each in binarised mode (55 columns); binaries pass through
    /// (6 columns). Raw width 60, binarised width 127.
    pub fn hmda() -> Self {
        FeatureSchema::new(vec![
            FeatureSpec::continuous("loan_amount", 11),
            FeatureSpec::continuous("loan_term", 11),
            FeatureSpec::continuous("interest_rate", 11),
            FeatureSpec::continuous("property_value", 11),
            FeatureSpec::continuous("combined_ltv", 11),
            FeatureSpec::continuous("income", 11),
            FeatureSpec::categorical("debt_to_income_bucket", 8),
            FeatureSpec::categorical("loan_type", 4),
            FeatureSpec::categorical("loan_purpose", 6),
            FeatureSpec::categorical("occupancy_type", 3),
            FeatureSpec::categorical("property_units", 4),
            FeatureSpec::categorical("applicant_age_bucket", 8),
            FeatureSpec::categorical("market_region", 15),
            FeatureSpec::binary("conforming_loan"),
            FeatureSpec::binary("first_lien"),
            FeatureSpec::binary("open_end_credit"),
            FeatureSpec::binary("interest_only"),
            FeatureSpec::binary("balloon_payment"),
            FeatureSpec::binary("high_cost_flag"),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::config("schema has no features"));
        }
        for f in &self.features {
            match f.kind {
                FeatureKind::Continuous if f.bins < 2 => {
                    return Err(Error::config(format!(
                        "continuous feature `{}` needs bins >= 2",
                        f.name
                    )));
                }
                FeatureKind::Categorical if f.vocab < 1 => {
                    return Err(Error::config(format!(
                        "categorical feature `{}` needs vocab >= 1",
                        f.name
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parse the schema file format: one `feature <name> <kind> [bins=N]
    /// [vocab=N]` line per feature, optional `label <name>` line, `#`
    /// comments.
    pub fn parse(text: &str) -> Result<FeatureSchema> {
        let mut features = Vec::new();
        let mut label = "label".to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("label") => {
                    label = parts
                        .next()
                        .ok_or_else(|| Error::format(format!("line {}: label needs a name", lineno + 1)))?
                        .to_string();
                }
                Some("feature") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::format(format!("line {}: feature needs a name", lineno + 1)))?;
                    let kind = parts
                        .next()
                        .ok_or_else(|| Error::format(format!("line {}: feature needs a kind", lineno + 1)))?;
                    let mut bins = 11usize;
                    let mut vocab = 8usize;
                    for opt in parts {
                        if let Some(v) = opt.strip_prefix("bins=") {
                            bins = v.parse().map_err(|_| {
                                Error::format(format!("line {}: bad bins", lineno + 1))
                            })?;
                        } else if let Some(v) = opt.strip_prefix("vocab=") {
                            vocab = v.parse().map_err(|_| {
                                Error::format(format!("line {}: bad vocab", lineno + 1))
                            })?;
                        } else {
                            return Err(Error::format(format!(
                                "line {}: unknown option `{opt}`",
                                lineno + 1
                            )));
                        }
                    }
                    let spec = match kind {
                        "continuous" => FeatureSpec::continuous(name, bins),
                        "categorical" => FeatureSpec::categorical(name, vocab),
                        "binary" => FeatureSpec::binary(name),
                        other => {
                            return Err(Error::format(format!(
                                "line {}: unknown feature kind `{other}`",
                                lineno + 1
                            )))
                        }
                    };
                    features.push(spec);
                }
                Some(other) => {
                    return Err(Error::format(format!(
                        "line {}: unknown directive `{other}`",
                        lineno + 1
                    )))
                }
                None => {}
            }
        }
        let schema = FeatureSchema { features, label };
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# schema v1\n");
        let _ = writeln!(out, "label {}", self.label);
        for f in &self.features {
            match f.kind {
                FeatureKind::Continuous => {
                    let _ = writeln!(out, "feature {} continuous bins={}", f.name, f.bins);
                }
                FeatureKind::Categorical => {
                    let _ = writeln!(out, "feature {} categorical vocab={}", f.name, f.vocab);
                }
                FeatureKind::Binary => {
                    let _ = writeln!(out, "feature {} binary", f.name);
                }
            }
        }
        out
    }
}

/// Which of the three representations to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingMode {
    RawIsing,
    RawOnehot,
    Binarized,
}

impl EncodingMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncodingMode::RawIsing => "raw-ising",
            EncodingMode::RawOnehot => "raw-onehot",
            EncodingMode::Binarized => "binarized",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-ising" => Ok(EncodingMode::RawIsing),
            "raw-onehot" => Ok(EncodingMode::RawOnehot),
            "binarized" => Ok(EncodingMode::Binarized),
            other => Err(Error::config(format!("unknown encoding mode `{other}`"))),
        }
    }
}

/// Spin centring switch for the ablation: `Spin` produces `{-1, +1}` columns
/// (and continuous values on `[-1, +1]`), `ZeroOne` leaves them `{0, 1}`
/// (continuous on `[0, 1]`). Ignored by `raw-onehot`, which is `{0, 1}` by
/// definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Centring {
    Spin,
    ZeroOne,
}

/// Map a bit to a spin: `0 -> -1`, `1 -> +1`.
pub fn ising_map(x: u8) -> Result<f64> {
    match x {
        0 => Ok(-1.0),
        1 => Ok(1.0),
        other => Err(Error::data(format!("ising_map expects 0 or 1, got {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FeatureFit {
    /// Sorted training values: the empirical quantile grid.
    Quantile { grid: Vec<f64> },
    /// Training mean and standard deviation.
    Standard { mean: f64, std: f64 },
    /// Quantile bin edges (length `bins - 1`, non-decreasing).
    Binned { edges: Vec<f64> },
    /// Ordered vocabulary (most frequent first, ties by value).
    Vocab { values: Vec<String> },
    /// Binary feature, nothing to fit.
    Passthrough,
}

/// Fitted encoder: schema, mode, centring and per-feature fitted state.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderFit {
    pub schema: FeatureSchema,
    pub mode: EncodingMode,
    pub centring: Centring,
    fits: Vec<FeatureFit>,
}

/// Fit the encoder on training rows only.
pub fn fit_encoder(table: &RawTable, schema: &FeatureSchema, mode: EncodingMode) -> Result<EncoderFit> {
    schema.validate()?;
    if table.is_empty() {
        return Err(Error::config("cannot fit an encoder on an empty table"));
    }
    let cols = resolve_columns(schema, &table.headers)?;
    let mut fits = Vec::with_capacity(schema.features.len());
    for (f, &col) in schema.features.iter().zip(&cols) {
        let fit = match f.kind {
            FeatureKind::Continuous => {
                let mut values = Vec::with_capacity(table.len());
                for (i, row) in table.rows.iter().enumerate() {
                    values.push(parse_number(&f.name, i, &row[col])?);
                }
                values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if values.first() == values.last() {
                    return Err(Error::config(format!(
                        "continuous feature `{}` is constant in the training data",
                        f.name
                    )));
                }
                match mode {
                    EncodingMode::RawIsing => FeatureFit::Quantile { grid: values },
                    EncodingMode::RawOnehot => {
                        let n = values.len() as f64;
                        let mean = values.iter().sum::<f64>() / n;
                        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        FeatureFit::Standard { mean, std: var.sqrt() }
                    }
                    EncodingMode::Binarized => {
                        // nearest-rank quantiles at k/bins, k = 1..bins-1
                        let n = values.len();
                        let mut edges = Vec::with_capacity(f.bins - 1);
                        for k in 1..f.bins {
                            let q = k as f64 / f.bins as f64;
                            let idx = ((n - 1) as f64 * q).round() as usize;
                            edges.push(values[idx]);
                        }
                        FeatureFit::Binned { edges }
                    }
                }
            }
            FeatureKind::Categorical => {
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for row in &table.rows {
                    *counts.entry(row[col].as_str()).or_insert(0) += 1;
                }
                let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
                entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                entries.truncate(f.vocab);
                FeatureFit::Vocab {
                    values: entries.into_iter().map(|(v, _)| v.to_string()).collect(),
                }
            }
            FeatureKind::Binary => {
                for (i, row) in table.rows.iter().enumerate() {
                    if row[col] != "0" && row[col] != "1" {
                        return Err(Error::data(format!(
                            "binary feature `{}` row {i}: expected 0/1, got `{}`",
                            f.name, row[col]
                        )));
                    }
                }
                FeatureFit::Passthrough
            }
        };
        fits.push(fit);
    }
    Ok(EncoderFit {
        schema: schema.clone(),
        mode,
        centring: Centring::Spin,
        fits,
    })
}

fn resolve_columns(schema: &FeatureSchema, headers: &[String]) -> Result<Vec<usize>> {
    schema
        .features
        .iter()
        .map(|f| {
            headers
                .iter()
                .position(|h| *h == f.name)
                .ok_or_else(|| Error::data(format!("missing field `{}`", f.name)))
        })
        .collect()
}

fn parse_number(feature: &str, row: usize, text: &str) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("feature `{feature}` row {row}: `{text}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!(
            "feature `{feature}` row {row}: non-finite value"
        )));
    }
    Ok(v)
}

impl EncoderFit {
    /// Same fit, different centring.
    pub fn with_centring(mut self, centring: Centring) -> Self {
        self.centring = centring;
        self
    }

    /// Width of the encoded vectors.
    pub fn output_width(&self) -> usize {
        self.schema
            .features
            .iter()
            .map(|f| self.feature_width(f))
            .sum()
    }

    fn feature_width(&self, f: &FeatureSpec) -> usize {
        match (f.kind, self.mode) {
            (FeatureKind::Continuous, EncodingMode::Binarized) => f.bins,
            (FeatureKind::Continuous, _) => 1,
            (FeatureKind::Categorical, EncodingMode::Binarized) => f.vocab + 1,
            (FeatureKind::Categorical, _) => f.vocab,
            (FeatureKind::Binary, _) => 1,
        }
    }

    fn off_value(&self) -> f64 {
        match (self.mode, self.centring) {
            (EncodingMode::RawOnehot, _) | (_, Centring::ZeroOne) => 0.0,
            (_, Centring::Spin) => -1.0,
        }
    }

    fn on_value(&self) -> f64 {
        1.0
    }

    /// Encode one row (fields aligned with `col_map`, as produced by
    /// [`EncoderFit::column_map`]).
    pub fn encode_row(&self, fields: &[String], col_map: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.output_width());
        for ((f, fit), &col) in self.schema.features.iter().zip(&self.fits).zip(col_map) {
            let text = fields
                .get(col)
                .ok_or_else(|| Error::data(format!("missing field `{}`", f.name)))?;
            match fit {
                FeatureFit::Quantile { grid } => {
                    let v = parse_number(&f.name, 0, text)?;
                    let p = quantile_position(grid, v);
                    out.push(match self.centring {
                        Centring::Spin => (2.0 * p - 1.0).clamp(-1.0, 1.0),
                        Centring::ZeroOne => p.clamp(0.0, 1.0),
                    });
                }
                FeatureFit::Standard { mean, std } => {
                    let v = parse_number(&f.name, 0, text)?;
                    out.push((v - mean) / std);
                }
                FeatureFit::Binned { edges } => {
                    let v = parse_number(&f.name, 0, text)?;
                    let bin = edges.partition_point(|e| *e <= v);
                    let off = self.off_value();
                    for k in 0..f.bins {
                        out.push(if k == bin { self.on_value() } else { off });
                    }
                }
                FeatureFit::Vocab { values } => {
                    let idx = values.iter().position(|v| v == text.as_str());
                    let width = self.feature_width(f);
                    let off = self.off_value();
                    let on_idx = match (idx, self.mode) {
                        (Some(i), _) => Some(i),
                        // catch-all bucket
                        (None, EncodingMode::Binarized) => Some(width - 1),
                        // raw one-hot has no catch-all column: unseen values
                        // encode as all-off
                        (None, _) => None,
                    };
                    for k in 0..width {
                        out.push(if Some(k) == on_idx { self.on_value() } else { off });
                    }
                }
                FeatureFit::Passthrough => {
                    let bit = match text.as_str() {
                        "0" => 0u8,
                        "1" => 1u8,
                        other => {
                            return Err(Error::data(format!(
                                "binary feature `{}`: expected 0/1, got `{other}`",
                                f.name
                            )))
                        }
                    };
                    let v = match (self.mode, self.centring) {
                        (EncodingMode::RawOnehot, _) => bit as f64,
                        (_, Centring::ZeroOne) => bit as f64,
                        (_, Centring::Spin) => ising_map(bit)?,
                    };
                    out.push(v);
                }
            }
        }
        Ok(out)
    }

    /// Resolve schema features to column indices of a table's header.
    pub fn column_map(&self, headers: &[String]) -> Result<Vec<usize>> {
        resolve_columns(&self.schema, headers)
    }

    /// Encode a whole table into a dataset. When `with_keys` is set, group
    /// keys are derived from the canonical spin-centred binarised vectors
    /// regardless of this fit's own mode and centring.
    pub fn encode_table(
        &self,
        table: &RawTable,
        keys_from: Option<&EncoderFit>,
    ) -> Result<crate::data::LabeledDataset> {
        let map = self.column_map(&table.headers)?;
        let mut ds = crate::data::LabeledDataset::new(self.output_width());
        let key_fit = keys_from
            .map(|f| -> Result<_> {
                if f.mode != EncodingMode::Binarized || f.centring != Centring::Spin {
                    return Err(Error::config(
                        "group keys must come from a spin-centred binarised fit",
                    ));
                }
                Ok((f, f.column_map(&table.headers)?))
            })
            .transpose()?;
        let mut keys = Vec::new();
        for i in 0..table.len() {
            let row = &table.rows[i];
            let feats = self.encode_row(row, &map)?;
            ds.push_row(table.ids[i], table.labels[i], &feats);
            if let Some((kf, kmap)) = &key_fit {
                let kvec = kf.encode_row(row, kmap)?;
                keys.push(group_key(&kvec)?);
            }
        }
        if key_fit.is_some() {
            ds.keys = Some(keys);
        }
        Ok(ds)
    }

    /// Versioned text serialization.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "OPTIDEQ-ENCODER v1")?;
        writeln!(f, "mode {}", self.mode.as_str())?;
        writeln!(
            f,
            "centring {}",
            match self.centring {
                Centring::Spin => "spin",
                Centring::ZeroOne => "zero-one",
            }
        )?;
        writeln!(f, "label {}", self.schema.label)?;
        for (spec, fit) in self.schema.features.iter().zip(&self.fits) {
            match fit {
                FeatureFit::Quantile { grid } => {
                    write!(f, "quantile\t{}\t{}", spec.name, grid.len())?;
                    for v in grid {
                        write!(f, " {v}")?;
                    }
                    writeln!(f)?;
                }
                FeatureFit::Standard { mean, std } => {
                    writeln!(f, "standard\t{}\t{mean} {std}", spec.name)?;
                }
                FeatureFit::Binned { edges } => {
                    write!(f, "binned\t{}\t{}", spec.name, spec.bins)?;
                    for v in edges {
                        write!(f, " {v}")?;
                    }
                    writeln!(f)?;
                }
                FeatureFit::Vocab { values } => {
                    write!(f, "vocab\t{}\t{}", spec.name, spec.vocab)?;
                    for v in values {
                        write!(f, "\t{v}")?;
                    }
                    writeln!(f)?;
                }
                FeatureFit::Passthrough => {
                    writeln!(f, "binary\t{}", spec.name)?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<EncoderFit> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some("OPTIDEQ-ENCODER v1") {
            return Err(Error::format("missing encoder header"));
        }
        let mut mode = None;
        let mut centring = Centring::Spin;
        let mut label = "label".to_string();
        let mut features = Vec::new();
        let mut fits = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("mode ") {
                mode = Some(EncodingMode::from_str(v)?);
            } else if let Some(v) = line.strip_prefix("centring ") {
                centring = match v {
                    "spin" => Centring::Spin,
                    "zero-one" => Centring::ZeroOne,
                    other => return Err(Error::format(format!("bad centring `{other}`"))),
                };
            } else if let Some(v) = line.strip_prefix("label ") {
                label = v.to_string();
            } else {
                let mut parts = line.split('\t');
                let tag = parts.next().unwrap_or("");
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("fit line missing feature name"))?
                    .to_string();
                match tag {
                    "quantile" => {
                        let rest = parts.next().ok_or_else(|| Error::format("missing grid"))?;
                        let mut it = rest.split(' ');
                        let n: usize = it
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::format("bad grid length"))?;
                        let grid: Vec<f64> = it
                            .map(|s| s.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::format("bad grid value"))?;
                        if grid.len() != n {
                            return Err(Error::format("grid length mismatch"));
                        }
                        features.push(FeatureSpec::continuous(&name, 11));
                        fits.push(FeatureFit::Quantile { grid });
                    }
                    "standard" => {
                        let rest = parts.next().ok_or_else(|| Error::format("missing stats"))?;
                        let vals: Vec<f64> = rest
                            .split(' ')
                            .map(|s| s.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::format("bad stats"))?;
                        if vals.len() != 2 {
                            return Err(Error::format("standard fit needs mean and std"));
                        }
                        features.push(FeatureSpec::continuous(&name, 11));
                        fits.push(FeatureFit::Standard {
                            mean: vals[0],
                            std: vals[1],
                        });
                    }
                    "binned" => {
                        let rest = parts.next().ok_or_else(|| Error::format("missing edges"))?;
                        let mut it = rest.split(' ');
                        let bins: usize = it
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::format("bad bin count"))?;
                        let edges: Vec<f64> = it
                            .map(|s| s.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::format("bad edge value"))?;
                        if edges.len() != bins - 1 {
                            return Err(Error::format("edge count mismatch"));
                        }
                        features.push(FeatureSpec::continuous(&name, bins));
                        fits.push(FeatureFit::Binned { edges });
                    }
                    "vocab" => {
                        let cap: usize = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::format("bad vocab cap"))?;
                        let values: Vec<String> = parts.map(|s| s.to_string()).collect();
                        features.push(FeatureSpec::categorical(&name, cap));
                        fits.push(FeatureFit::Vocab { values });
                    }
                    "binary" => {
                        features.push(FeatureSpec::binary(&name));
                        fits.push(FeatureFit::Passthrough);
                    }
                    other => return Err(Error::format(format!("unknown fit tag `{other}`"))),
                }
            }
        }
        Ok(EncoderFit {
            schema: FeatureSchema { features, label },
            mode: mode.ok_or_else(|| Error::format("encoder file lacks mode"))?,
            centring,
            fits,
        })
    }
}

/// Empirical CDF position of `v` in the sorted grid, on `[0, 1]`.
///
/// Uses midpoint ranks rescaled so the training min and max map to exactly
/// 0 and 1: with `lo` values strictly below `v` and `hi` values at most `v`,
/// the position is `(lo + hi - 1) / (2 (n - 1))`.
fn quantile_position(grid: &[f64], v: f64) -> f64 {
    let n = grid.len();
    debug_assert!(n >= 2);
    let lo = grid.partition_point(|x| *x < v);
    let hi = grid.partition_point(|x| *x <= v);
    ((lo + hi) as f64 - 1.0) / (2.0 * (n as f64 - 1.0))
}

/// Canonical bit-packed key of a spin vector.
///
/// Bit `i` of octet `i / 8` (little-endian within the octet) is 1 for `+1`
/// and 0 for `-1`; trailing bits of the last octet are zero. A 127-column
/// vector packs into 16 octets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupKey(Vec<u8>);

impl GroupKey {
    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(self.0.len() * 2);
        for b in &self.0 {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<GroupKey> {
        if s.len() % 2 != 0 {
            return Err(Error::format("odd-length hex key"));
        }
        let mut bytes = Vec::with_capacity(s.len() / 2);
        for i in (0..s.len()).step_by(2) {
            let b = u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::format("bad hex key"))?;
            bytes.push(b);
        }
        Ok(GroupKey(bytes))
    }
}

/// Pack a spin-valued vector into its canonical key.
pub fn group_key(v: &[f64]) -> Result<GroupKey> {
    let mut bytes = vec![0u8; v.len().div_ceil(8)];
    for (i, &s) in v.iter().enumerate() {
        if s == 1.0 {
            bytes[i / 8] |= 1 << (i % 8);
        } else if s != -1.0 {
            return Err(Error::data(format!(
                "group_key expects spin entries, got {s} at column {i}"
            )));
        }
    }
    Ok(GroupKey(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawTable;

    fn table_from(headers: &[&str], rows: &[Vec<&str>]) -> RawTable {
        RawTable {
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
            ids: (0..rows.len() as u64).collect(),
            labels: vec![0; rows.len()],
        }
    }

    #[test]
    fn ising_map_anchors() {
        assert_eq!(ising_map(0).unwrap(), -1.0);
        assert_eq!(ising_map(1).unwrap(), 1.0);
        assert!(ising_map(2).is_err());
        // round trip (s + 1) / 2
        for x in [0u8, 1u8] {
            let s = ising_map(x).unwrap();
            assert_eq!(((s + 1.0) / 2.0) as u8, x);
        }
    }

    #[test]
    fn hmda_preset_widths() {
        let schema = FeatureSchema::hmda();
        assert_eq!(schema.features.len(), 19);
        let rows = hmda_like_rows(40);
        let table = table_from(&hmda_headers(), &rows.iter().map(|r| r.iter().map(|s| s.as_str()).collect()).collect::<Vec<_>>());
        for (mode, want) in [
            (EncodingMode::RawIsing, 60),
            (EncodingMode::RawOnehot, 60),
            (EncodingMode::Binarized, 127),
        ] {
            let fit = fit_encoder(&table, &schema, mode).unwrap();
            assert_eq!(fit.output_width(), want, "mode {mode:?}");
        }
    }

    fn hmda_headers() -> Vec<&'static str> {
        vec![
            "loan_amount",
            "loan_term",
            "interest_rate",
            "property_value",
            "combined_ltv",
            "income",
            "debt_to_income_bucket",
            "loan_type",
            "loan_purpose",
            "occupancy_type",
            "property_units",
            "applicant_age_bucket",
            "market_region",
            "conforming_loan",
            "first_lien",
            "open_end_credit",
            "interest_only",
            "balloon_payment",
            "high_cost_flag",
            "label",
        ]
    }

    fn hmda_like_rows(n: usize) -> Vec<Vec<String>> {
        (0..n)
            .map(|i| {
                vec![
                    format!("{}", 100.0 + i as f64 * 3.5),
                    format!("{}", 120 + (i % 30)),
                    format!("{}", 2.0 + (i % 13) as f64 / 10.0),
                    format!("{}", 200.0 + (i * 7 % 91) as f64),
                    format!("{}", 40.0 + (i % 55) as f64),
                    format!("{}", 30.0 + (i * 3 % 70) as f64),
                    format!("dti{}", i % 5),
                    format!("type{}", i % 3),
                    format!("purpose{}", i % 4),
                    format!("occ{}", i % 2),
                    format!("units{}", i % 3),
                    format!("age{}", i % 6),
                    format!("region{}", i % 9),
                    format!("{}", i % 2),
                    format!("{}", (i / 2) % 2),
                    format!("{}", (i / 3) % 2),
                    format!("{}", (i / 4) % 2),
                    format!("{}", (i / 5) % 2),
                    format!("{}", (i / 6) % 2),
                    "0".to_string(),
                ]
            })
            .collect()
    }

    #[test]
    fn toy_binarized_width_is_hand_countable() {
        // 1 continuous with 4 bins + 1 categorical with 3 values + catch-all
        let schema = FeatureSchema::new(vec![
            FeatureSpec::continuous("x", 4),
            FeatureSpec::categorical("c", 3),
        ]);
        let rows: Vec<Vec<&str>> = vec![
            vec!["1.0", "a"],
            vec!["2.0", "b"],
            vec!["3.0", "c"],
            vec!["4.0", "a"],
        ];
        let table = table_from(&["x", "c"], &rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::Binarized).unwrap();
        assert_eq!(fit.output_width(), 8);
    }

    #[test]
    fn quantile_anchors_median_min_clip() {
        let schema = FeatureSchema::new(vec![FeatureSpec::continuous("x", 11)]);
        // odd count, unique median 5.0
        let rows: Vec<Vec<&str>> =
            vec![vec!["1.0"], vec!["3.0"], vec!["5.0"], vec!["7.0"], vec!["9.0"]];
        let table = table_from(&["x"], &rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::RawIsing).unwrap();
        let map = fit.column_map(&table.headers).unwrap();
        let enc = |v: &str| fit.encode_row(&[v.to_string()], &map).unwrap()[0];
        assert_eq!(enc("5.0"), 0.0);
        assert_eq!(enc("1.0"), -1.0);
        assert_eq!(enc("9.0"), 1.0);
        assert_eq!(enc("0.5"), -1.0, "below training range clips");
        assert_eq!(enc("10.0"), 1.0, "above training range clips");
    }

    #[test]
    fn constant_feature_is_rejected_by_name() {
        let schema = FeatureSchema::new(vec![FeatureSpec::continuous("flatline", 4)]);
        let rows: Vec<Vec<&str>> = vec![vec!["2.0"], vec!["2.0"], vec!["2.0"]];
        let table = table_from(&["flatline"], &rows);
        let err = fit_encoder(&table, &schema, EncodingMode::RawIsing).unwrap_err();
        assert!(err.to_string().contains("flatline"));
    }

    #[test]
    fn binarized_rows_have_exactly_one_hot_per_group() {
        let schema = FeatureSchema::hmda();
        let rows = hmda_like_rows(1000);
        let str_rows: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(|s| s.as_str()).collect()).collect();
        let table = table_from(&hmda_headers(), &str_rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::Binarized).unwrap();
        let map = fit.column_map(&table.headers).unwrap();

        // per-group counting oracle: group extents derived from the schema
        let mut groups = Vec::new();
        let mut offset = 0;
        for f in &schema.features {
            let w = match f.kind {
                FeatureKind::Continuous => f.bins,
                FeatureKind::Categorical => f.vocab + 1,
                FeatureKind::Binary => 1,
            };
            groups.push((offset, w, f.kind));
            offset += w;
        }
        assert_eq!(offset, 127);

        for row in &table.rows {
            let v = fit.encode_row(row, &map).unwrap();
            assert_eq!(v.len(), 127);
            assert!(v.iter().all(|&x| x == 1.0 || x == -1.0), "spin-valued");
            for &(start, w, kind) in &groups {
                if kind == FeatureKind::Binary {
                    continue;
                }
                let plus = v[start..start + w].iter().filter(|&&x| x == 1.0).count();
                assert_eq!(plus, 1, "one-hot group at {start} width {w}");
            }
        }
    }

    #[test]
    fn raw_ising_marginals_are_uniform() {
        // Kolmogorov-Smirnov distance of encoded training values against
        // U(-1, 1), bounded by twice the tie mass.
        let schema = FeatureSchema::new(vec![FeatureSpec::continuous("x", 11)]);
        let n = 500;
        let mut rows: Vec<Vec<String>> = (0..n)
            .map(|i| vec![format!("{}", ((i * 37) % 1009) as f64)])
            .collect();
        // inject a tie block: 50 identical values
        for row in rows.iter_mut().take(50) {
            row[0] = "5000.0".to_string();
        }
        let str_rows: Vec<Vec<&str>> = rows.iter().map(|r| vec![r[0].as_str()]).collect();
        let table = table_from(&["x"], &str_rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::RawIsing).unwrap();
        let map = fit.column_map(&table.headers).unwrap();
        let mut encoded: Vec<f64> = table
            .rows
            .iter()
            .map(|r| fit.encode_row(r, &map).unwrap()[0])
            .collect();
        encoded.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tie_mass = 50.0 / n as f64;
        let mut ks = 0.0f64;
        for (i, &y) in encoded.iter().enumerate() {
            let f_uni = (y + 1.0) / 2.0;
            let f_lo = i as f64 / n as f64;
            let f_hi = (i + 1) as f64 / n as f64;
            ks = ks.max((f_uni - f_lo).abs()).max((f_uni - f_hi).abs());
        }
        assert!(ks <= 2.0 * tie_mass, "KS {ks} vs tie mass {tie_mass}");
    }

    #[test]
    fn group_key_packs_little_endian() {
        // spins for bits 0..9: bit i set iff i in {0, 3, 8}
        let mut v = vec![-1.0; 10];
        v[0] = 1.0;
        v[3] = 1.0;
        v[8] = 1.0;
        let key = group_key(&v).unwrap();
        assert_eq!(key.bytes(), &[0b0000_1001, 0b0000_0001]);

        // pack/unpack round-trip oracle
        let unpack = |key: &GroupKey, len: usize| -> Vec<f64> {
            (0..len)
                .map(|i| {
                    if key.bytes()[i / 8] >> (i % 8) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                })
                .collect()
        };
        assert_eq!(unpack(&key, 10), v);
    }

    #[test]
    fn group_key_equality_and_rejection() {
        let a = group_key(&[1.0, -1.0, 1.0]).unwrap();
        let b = group_key(&[1.0, -1.0, 1.0]).unwrap();
        let c = group_key(&[1.0, -1.0, -1.0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(group_key(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn wide_key_spans_sixteen_octets() {
        let v: Vec<f64> = (0..127).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let key = group_key(&v).unwrap();
        assert_eq!(key.bytes().len(), 16);
        let back = GroupKey::from_hex(&key.to_hex()).unwrap();
        assert_eq!(back, key);
    }

    #[test]
    fn unseen_categorical_goes_to_catch_all_in_binarized() {
        let schema = FeatureSchema::new(vec![FeatureSpec::categorical("c", 2)]);
        let rows: Vec<Vec<&str>> = vec![vec!["a"], vec!["a"], vec!["b"]];
        let table = table_from(&["c"], &rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::Binarized).unwrap();
        let map = fit.column_map(&table.headers).unwrap();
        let v = fit.encode_row(&["zzz".to_string()], &map).unwrap();
        assert_eq!(v, vec![-1.0, -1.0, 1.0]);
        // raw mode: all-off
        let fit = fit_encoder(&table, &schema, EncodingMode::RawIsing).unwrap();
        let v = fit.encode_row(&["zzz".to_string()], &map).unwrap();
        assert_eq!(v, vec![-1.0, -1.0]);
    }

    #[test]
    fn centring_switch_produces_zero_one() {
        let schema = FeatureSchema::new(vec![
            FeatureSpec::continuous("x", 3),
            FeatureSpec::binary("b"),
        ]);
        let rows: Vec<Vec<&str>> = vec![vec!["1.0", "0"], vec!["2.0", "1"], vec!["3.0", "0"]];
        let table = table_from(&["x", "b"], &rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::Binarized)
            .unwrap()
            .with_centring(Centring::ZeroOne);
        let map = fit.column_map(&table.headers).unwrap();
        let v = fit.encode_row(&["2.0".to_string(), "1".to_string()], &map).unwrap();
        assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 2);
    }

    #[test]
    fn vocabulary_orders_by_frequency_then_value() {
        let schema = FeatureSchema::new(vec![FeatureSpec::categorical("c", 3)]);
        let rows: Vec<Vec<&str>> =
            vec![vec!["b"], vec!["b"], vec!["a"], vec!["a"], vec!["z"], vec!["q"]];
        let table = table_from(&["c"], &rows);
        let fit = fit_encoder(&table, &schema, EncodingMode::Binarized).unwrap();
        match &fit.fits[0] {
            FeatureFit::Vocab { values } => assert_eq!(values, &["a", "b", "q"]),
            other => panic!("unexpected fit {other:?}"),
        }
    }

    #[test]
    fn encoder_fit_roundtrips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let schema = FeatureSchema::hmda();
        let rows = hmda_like_rows(64);
        let str_rows: Vec<Vec<&str>> = rows.iter().map(|r| r.iter().map(|s| s.as_str()).collect()).collect();
        let table = table_from(&hmda_headers(), &str_rows);
        for mode in [EncodingMode::RawIsing, EncodingMode::RawOnehot, EncodingMode::Binarized] {
            let fit = fit_encoder(&table, &schema, mode).unwrap();
            let path = dir.path().join(format!("{}.enc", mode.as_str()));
            fit.write(&path).unwrap();
            let back = EncoderFit::read(&path).unwrap();
            assert_eq!(back.mode, fit.mode);
            assert_eq!(back.output_width(), fit.output_width());
            let map = fit.column_map(&table.headers).unwrap();
            for row in table.rows.iter().take(10) {
                let a = fit.encode_row(row, &map).unwrap();
                let b = back.encode_row(row, &map).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn schema_file_roundtrip() {
        let schema = FeatureSchema::hmda();
        let text = schema.to_text();
        let back = FeatureSchema::parse(&text).unwrap();
        assert_eq!(back, schema);
    }
}

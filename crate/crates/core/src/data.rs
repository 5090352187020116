//! Audit dataset ingestion, feature schemas and quantile binning.
//!
//! Every downstream model works on a [`BinnedMatrix`]: each feature value is
//! mapped to a small integer bin. Numeric bins are half-open intervals
//! `[edge_i, edge_{i+1})` (the last one unbounded above), categorical bins are
//! one per observed category, and every feature carries one trailing bin for
//! missing values.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// Column layout of an audit CSV, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub score_column: String,
    pub outcome_column: String,
    /// Explicit feature list; every remaining column is a feature when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    /// Columns to drop when `features` is not given.
    #[serde(default)]
    pub exclude: Vec<String>,
    /// Per-feature kind overrides. Unlisted features are numeric when every
    /// non-missing cell parses as a number.
    #[serde(default)]
    pub types: BTreeMap<String, FeatureKind>,
    #[serde(default = "default_max_bins")]
    pub max_bins: usize,
}

fn default_delimiter() -> char {
    ','
}

fn default_max_bins() -> usize {
    DEFAULT_MAX_BINS
}

impl SchemaConfig {
    pub fn new(score_column: impl Into<String>, outcome_column: impl Into<String>) -> Self {
        SchemaConfig {
            delimiter: ',',
            score_column: score_column.into(),
            outcome_column: outcome_column.into(),
            features: None,
            exclude: Vec::new(),
            types: BTreeMap::new(),
            max_bins: DEFAULT_MAX_BINS,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureValues {
    /// `NaN` marks a missing cell.
    Numeric(Vec<f64>),
    Categorical(Vec<Option<String>>),
}

impl FeatureValues {
    pub fn len(&self) -> usize {
        match self {
            FeatureValues::Numeric(v) => v.len(),
            FeatureValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureValues::Numeric(_) => FeatureKind::Numeric,
            FeatureValues::Categorical(_) => FeatureKind::Categorical,
        }
    }

    fn select(&self, rows: &[usize]) -> FeatureValues {
        match self {
            FeatureValues::Numeric(v) => FeatureValues::Numeric(rows.iter().map(|&r| v[r]).collect()),
            FeatureValues::Categorical(v) => {
                FeatureValues::Categorical(rows.iter().map(|&r| v[r].clone()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub values: FeatureValues,
}

impl FeatureColumn {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        FeatureColumn {
            name: name.into(),
            values: FeatureValues::Numeric(values),
        }
    }

    pub fn categorical(name: impl Into<String>, values: Vec<Option<String>>) -> Self {
        FeatureColumn {
            name: name.into(),
            values: FeatureValues::Categorical(values),
        }
    }
}

/// Feature rows labelled with a black-box score and (optionally) a ground-truth
/// outcome. Rows without an outcome are score-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDataset {
    features: Vec<FeatureColumn>,
    scores: Vec<f64>,
    outcomes: Vec<Option<bool>>,
    /// Rows dropped at load time because the score cell did not parse.
    pub rejected_rows: usize,
}

impl AuditDataset {
    pub fn new(
        features: Vec<FeatureColumn>,
        scores: Vec<f64>,
        outcomes: Vec<Option<bool>>,
    ) -> Result<Self> {
        let rows = scores.len();
        if rows == 0 {
            return Err(Error::InvalidDataset("dataset has no rows".into()));
        }
        if outcomes.len() != rows {
            return Err(Error::InvalidDataset(format!(
                "{} outcomes for {rows} scores",
                outcomes.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite score at row {i}")));
        }
        let mut seen = BTreeSet::new();
        for f in &features {
            if f.values.len() != rows {
                return Err(Error::InvalidDataset(format!(
                    "feature '{}' has {} values for {rows} rows",
                    f.name,
                    f.values.len()
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate feature '{}'", f.name)));
            }
        }
        Ok(AuditDataset {
            features,
            scores,
            outcomes,
            rejected_rows: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.scores.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[FeatureColumn] {
        &self.features
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn outcomes(&self) -> &[Option<bool>] {
        &self.outcomes
    }

    /// Outcomes as 0/1 reals; score-only rows become `NaN`.
    pub fn outcome_targets(&self) -> Vec<f64> {
        self.outcomes
            .iter()
            .map(|o| match o {
                Some(true) => 1.0,
                Some(false) => 0.0,
                None => f64::NAN,
            })
            .collect()
    }

    pub fn is_labelled(&self, row: usize) -> bool {
        self.outcomes[row].is_some()
    }

    pub fn score_only_rows(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_none()).count()
    }

    /// Rows restricted to `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> AuditDataset {
        AuditDataset {
            features: self
                .features
                .iter()
                .map(|f| FeatureColumn {
                    name: f.name.clone(),
                    values: f.values.select(rows),
                })
                .collect(),
            scores: rows.iter().map(|&r| self.scores[r]).collect(),
            outcomes: rows.iter().map(|&r| self.outcomes[r]).collect(),
            rejected_rows: 0,
        }
    }

    /// Stable content hash, used to tie reports to the data they came from.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for f in &self.features {
            hasher.update(f.name.as_bytes());
            hasher.update([0u8]);
            match &f.values {
                FeatureValues::Numeric(v) => {
                    for x in v {
                        hasher.update(x.to_bits().to_le_bytes());
                    }
                }
                FeatureValues::Categorical(v) => {
                    for x in v {
                        match x {
                            Some(s) => {
                                hasher.update([1u8]);
                                hasher.update(s.as_bytes());
                                hasher.update([0u8]);
                            }
                            None => hasher.update([2u8]),
                        }
                    }
                }
            }
        }
        for s in &self.scores {
            hasher.update(s.to_bits().to_le_bytes());
        }
        for o in &self.outcomes {
            hasher.update([match o {
                None => 2u8,
                Some(true) => 1,
                Some(false) => 0,
            }]);
        }
        hex::encode(hasher.finalize())
    }

    /// Comma-separated text readable by [`parse_csv`]: features, then the
    /// score and outcome columns. Missing cells are written empty.
    pub fn to_csv(&self, score_column: &str, outcome_column: &str) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        header.extend([score_column, outcome_column]);
        w.write_record(&header)?;
        for r in 0..self.n_rows() {
            let mut row: Vec<String> = self
                .features
                .iter()
                .map(|f| match &f.values {
                    FeatureValues::Numeric(v) if v[r].is_nan() => String::new(),
                    FeatureValues::Numeric(v) => v[r].to_string(),
                    FeatureValues::Categorical(v) => v[r].clone().unwrap_or_default(),
                })
                .collect();
            row.push(self.scores[r].to_string());
            row.push(match self.outcomes[r] {
                Some(true) => "1".into(),
                Some(false) => "0".into(),
                None => String::new(),
            });
            w.write_record(&row)?;
        }
        w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
    }
}

pub(crate) fn is_missing_cell(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("null")
}

/// Reads an audit CSV. Rows whose score does not parse as a finite number are
/// dropped and counted in [`AuditDataset::rejected_rows`]; rows with an empty
/// outcome cell are kept as score-only rows.
pub fn load_csv(path: &Path, config: &SchemaConfig) -> Result<AuditDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes, config)
}

pub fn parse_csv(bytes: &[u8], config: &SchemaConfig) -> Result<AuditDataset> {
    if !config.delimiter.is_ascii() {
        return Err(Error::Config(format!("delimiter {:?} is not ASCII", config.delimiter)));
    }
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let score_col = column(&config.score_column)?;
    let outcome_col = column(&config.outcome_column)?;

    let feature_names: Vec<String> = match &config.features {
        Some(list) => list.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, h)| *i != score_col && *i != outcome_col && !config.exclude.contains(h))
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let feature_cols = feature_names
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;
    for name in config.types.keys() {
        if !feature_names.contains(name) {
            return Err(Error::Config(format!("type override for unknown feature '{name}'")));
        }
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); feature_cols.len()];
    let mut scores = Vec::new();
    let mut outcomes = Vec::new();
    let mut rejected = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let score = record.get(score_col).and_then(|s| s.parse::<f64>().ok());
        let Some(score) = score.filter(|s| s.is_finite()) else {
            rejected += 1;
            continue;
        };
        let cell = record.get(outcome_col).unwrap_or("");
        let outcome = if is_missing_cell(cell) {
            None
        } else {
            match cell.parse::<f64>() {
                Ok(v) if v == 0.0 => Some(false),
                Ok(v) if v == 1.0 => Some(true),
                _ => {
                    return Err(Error::NonBinaryOutcome {
                        row,
                        value: cell.to_owned(),
                    })
                }
            }
        };
        scores.push(score);
        outcomes.push(outcome);
        for (dst, &c) in raw.iter_mut().zip(&feature_cols) {
            dst.push(record.get(c).unwrap_or("").to_owned());
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyFile);
    }

    let features = feature_names
        .into_iter()
        .zip(raw)
        .map(|(name, cells)| {
            let parsed: Option<Vec<f64>> = cells
                .iter()
                .map(|c| {
                    if is_missing_cell(c) {
                        Some(f64::NAN)
                    } else {
                        c.parse::<f64>().ok().filter(|v| v.is_finite())
                    }
                })
                .collect();
            let kind = config.types.get(&name).copied().unwrap_or(if parsed.is_some() {
                FeatureKind::Numeric
            } else {
                FeatureKind::Categorical
            });
            match (kind, parsed) {
                (FeatureKind::Numeric, Some(values)) => Ok(FeatureColumn::numeric(name, values)),
                (FeatureKind::Numeric, None) => Err(Error::InvalidDataset(format!(
                    "feature '{name}' declared numeric but has non-numeric cells"
                ))),
                (FeatureKind::Categorical, _) => {
                    let values = cells
                        .into_iter()
                        .map(|c| (!is_missing_cell(&c)).then_some(c))
                        .collect();
                    Ok(FeatureColumn::categorical(name, values))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut data = AuditDataset::new(features, scores, outcomes)?;
    data.rejected_rows = rejected;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BinLayout {
    Numeric {
        /// Strictly increasing interior edges; `edges.len() + 1` value bins.
        edges: Vec<f64>,
        /// Smallest and largest observed value, for labelling the outer bins.
        min: f64,
        max: f64,
    },
    Categorical {
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub name: String,
    pub layout: BinLayout,
}

impl FeatureBins {
    /// Bins holding observed values (missing bin excluded).
    pub fn n_value_bins(&self) -> usize {
        match &self.layout {
            BinLayout::Numeric { edges, .. } => edges.len() + 1,
            BinLayout::Categorical { categories } => categories.len(),
        }
    }

    pub fn missing_bin(&self) -> usize {
        self.n_value_bins()
    }

    pub fn n_bins(&self) -> usize {
        self.n_value_bins() + 1
    }

    pub fn kind(&self) -> FeatureKind {
        match self.layout {
            BinLayout::Numeric { .. } => FeatureKind::Numeric,
            BinLayout::Categorical { .. } => FeatureKind::Categorical,
        }
    }

    /// Bin of a numeric value: the number of edges `<= x`, so a value equal
    /// to an edge lands in the bin to its right. Out-of-range values clamp to
    /// the outer bins and `NaN` goes to the missing bin.
    pub fn numeric_bin(&self, x: f64) -> usize {
        match &self.layout {
            BinLayout::Numeric { edges, .. } => {
                if x.is_nan() {
                    self.missing_bin()
                } else {
                    edges.partition_point(|&e| e <= x)
                }
            }
            BinLayout::Categorical { .. } => self.missing_bin(),
        }
    }

    pub fn category_bin(&self, value: Option<&str>) -> usize {
        match (&self.layout, value) {
            (BinLayout::Categorical { categories }, Some(v)) => categories
                .binary_search_by(|c| c.as_str().cmp(v))
                .unwrap_or(self.missing_bin()),
            _ => self.missing_bin(),
        }
    }

    pub fn bin_label(&self, bin: usize) -> String {
        if bin == self.missing_bin() {
            return "missing".into();
        }
        match &self.layout {
            BinLayout::Numeric { edges, min, .. } => {
                if edges.is_empty() {
                    format!("{min}")
                } else if bin == 0 {
                    format!("<{}", edges[0])
                } else if bin == edges.len() {
                    format!(">={}", edges[bin - 1])
                } else {
                    format!("[{},{})", edges[bin - 1], edges[bin])
                }
            }
            BinLayout::Categorical { categories } => categories[bin].clone(),
        }
    }

    /// x coordinate used when plotting a bin: the lower edge (observed
    /// minimum for bin 0) for numeric features, the bin index otherwise.
    pub fn bin_position(&self, bin: usize) -> f64 {
        match &self.layout {
            BinLayout::Numeric { edges, min, .. } if bin < self.missing_bin() => {
                if bin == 0 {
                    *min
                } else {
                    edges[bin - 1]
                }
            }
            _ => bin as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub max_bins: usize,
    pub features: Vec<FeatureBins>,
}

impl FeatureSchema {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_bins(&self) -> Vec<usize> {
        self.features.iter().map(FeatureBins::n_bins).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Quantile edges over the sorted, non-missing values of one feature: one bin
/// per distinct value when there are at most `max_bins` of them, otherwise
/// edges at the `i / max_bins` order statistics with duplicates removed.
pub(crate) fn quantile_edges(sorted: &[f64], max_bins: usize) -> Vec<f64> {
    let mut distinct: Vec<f64> = sorted.to_vec();
    distinct.dedup();
    if distinct.len() <= max_bins {
        return distinct[1..].to_vec();
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for i in 1..max_bins {
        let idx = (i * n / max_bins).min(n - 1);
        let e = sorted[idx];
        if e > sorted[0] && edges.last().is_none_or(|&last| e > last) {
            edges.push(e);
        }
    }
    edges
}

/// Fits bin layouts for every feature. Pure function of the data and
/// `max_bins`.
pub fn fit_schema(data: &AuditDataset, max_bins: usize) -> Result<FeatureSchema> {
    if max_bins < 2 {
        return Err(Error::Config(format!("max_bins must be at least 2, got {max_bins}")));
    }
    if max_bins >= u16::MAX as usize {
        return Err(Error::Config(format!("max_bins {max_bins} exceeds the bin index range")));
    }
    let features = data
        .features()
        .iter()
        .map(|f| {
            let layout = match &f.values {
                FeatureValues::Numeric(values) => {
                    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
                    if sorted.is_empty() {
                        return Err(Error::EmptyFeature(f.name.clone()));
                    }
                    sorted.sort_by(f64::total_cmp);
                    BinLayout::Numeric {
                        edges: quantile_edges(&sorted, max_bins),
                        min: sorted[0],
                        max: sorted[sorted.len() - 1],
                    }
                }
                FeatureValues::Categorical(values) => {
                    let categories: BTreeSet<&String> = values.iter().flatten().collect();
                    if categories.is_empty() {
                        return Err(Error::EmptyFeature(f.name.clone()));
                    }
                    if categories.len() >= u16::MAX as usize {
                        return Err(Error::InvalidDataset(format!(
                            "feature '{}' has too many categories",
                            f.name
                        )));
                    }
                    BinLayout::Categorical {
                        categories: categories.into_iter().cloned().collect(),
                    }
                }
            };
            Ok(FeatureBins {
                name: f.name.clone(),
                layout,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSchema { max_bins, features })
}

/// Column-major matrix of bin indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMatrix {
    names: Vec<String>,
    n_bins: Vec<usize>,
    columns: Vec<Vec<u16>>,
    n_rows: usize,
}

impl BinnedMatrix {
    /// Builds a matrix from raw bin columns. Panics if any entry is out of
    /// range or the columns differ in length.
    pub fn from_columns(names: Vec<String>, n_bins: Vec<usize>, columns: Vec<Vec<u16>>) -> Self {
        assert_eq!(names.len(), columns.len());
        assert_eq!(n_bins.len(), columns.len());
        let n_rows = columns.first().map_or(0, Vec::len);
        for (col, &nb) in columns.iter().zip(&n_bins) {
            assert_eq!(col.len(), n_rows, "ragged columns");
            assert!(col.iter().all(|&b| (b as usize) < nb), "bin index out of range");
        }
        BinnedMatrix {
            names,
            n_bins,
            columns,
            n_rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn n_bins(&self) -> &[usize] {
        &self.n_bins
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, feature: usize) -> &[u16] {
        &self.columns[feature]
    }

    pub fn get(&self, row: usize, feature: usize) -> usize {
        self.columns[feature][row] as usize
    }

    /// Per-bin row counts of one feature.
    pub fn bin_counts(&self, feature: usize) -> Vec<usize> {
        let mut counts = vec![0; self.n_bins[feature]];
        for &b in &self.columns[feature] {
            counts[b as usize] += 1;
        }
        counts
    }
}

/// Maps every value of `data` to its bin under `schema`. Columns follow the
/// schema's feature order.
pub fn bin(data: &AuditDataset, schema: &FeatureSchema) -> Result<BinnedMatrix> {
    for f in data.features() {
        if schema.feature_index(&f.name).is_none() {
            return Err(Error::FeatureNotInSchema(f.name.clone()));
        }
    }
    let columns = schema
        .features
        .iter()
        .map(|fb| {
            let col = data
                .features()
                .iter()
                .find(|f| f.name == fb.name)
                .ok_or_else(|| Error::SchemaMismatch(format!("schema feature '{}' missing from data", fb.name)))?;
            let bins: Vec<u16> = match (&col.values, &fb.layout) {
                (FeatureValues::Numeric(v), BinLayout::Numeric { .. }) => {
                    v.iter().map(|&x| fb.numeric_bin(x) as u16).collect()
                }
                (FeatureValues::Categorical(v), BinLayout::Categorical { .. }) => {
                    v.iter().map(|x| fb.category_bin(x.as_deref()) as u16).collect()
                }
                _ => {
                    return Err(Error::SchemaMismatch(format!(
                        "feature '{}' kind differs between data and schema",
                        fb.name
                    )))
                }
            };
            Ok(bins)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BinnedMatrix {
        names: schema.features.iter().map(|f| f.name.clone()).collect(),
        n_bins: schema.n_bins(),
        columns,
        n_rows: data.n_rows(),
    })
}

//! EHR table ingestion: CSV parsing against a column schema, covariate
//! encoding under an impute-or-drop policy, and train-fitted standardization.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::SurvivalRecord;

pub const ID_COLUMN: &str = "PatientID";
pub const TIME_COLUMN: &str = "Time";
pub const EVENT_COLUMN: &str = "Event";

/// How one input column becomes output features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Encoder {
    Numeric,
    /// Fixed level → value map; the result is standardized like a numeric column.
    Ordinal {
        map: BTreeMap<String, f64>,
    },
    /// Reference-coded indicators; the first level is the reference. Levels are
    /// learned (sorted) from training data when not declared.
    OneHot {
        #[serde(default)]
        levels: Option<Vec<String>>,
    },
    /// +1 / -1 for the two declared states, 0 for a missing cell.
    Ternary {
        #[serde(default = "default_positive")]
        positive: Vec<String>,
        #[serde(default = "default_negative")]
        negative: Vec<String>,
    },
}

fn default_positive() -> Vec<String> {
    ["1", "yes", "y", "true"].map(String::from).to_vec()
}

fn default_negative() -> Vec<String> {
    ["0", "-1", "no", "n", "false"].map(String::from).to_vec()
}

impl Encoder {
    pub fn ternary() -> Self {
        Encoder::Ternary {
            positive: default_positive(),
            negative: default_negative(),
        }
    }

    fn is_numeric(&self) -> bool {
        matches!(self, Encoder::Numeric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub encoder: Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Keep incomplete columns; ternary cells map to 0, numeric cells to the training mean.
    Impute,
    /// Drop every column with at least one missing training cell.
    Drop,
}

impl std::str::FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impute" => Ok(MissingPolicy::Impute),
            "drop" => Ok(MissingPolicy::Drop),
            other => Err(Error::Config(format!(
                "unknown policy `{other}` (impute|drop)"
            ))),
        }
    }
}

/// Where an output feature comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Value,
    Level(String),
}

/// One output feature and its training statistics. Features that are not
/// standardized carry `center = 0`, `scale = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub name: String,
    pub column: String,
    pub source: FeatureSource,
    pub center: f64,
    pub scale: f64,
}

/// Column schema plus, once fitted, the policy and per-feature statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSpec {
    pub columns: Vec<ColumnSpec>,
    #[serde(default)]
    pub policy: Option<MissingPolicy>,
    #[serde(default)]
    pub features: Vec<FeatureStat>,
}

impl EncodingSpec {
    pub fn new(columns: Vec<ColumnSpec>) -> Self {
        Self {
            columns,
            policy: None,
            features: Vec::new(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn is_fitted(&self) -> bool {
        !self.features.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhrRow {
    pub patient_id: String,
    pub time: f64,
    pub event: bool,
    /// One cell per schema column, in schema order.
    pub cells: Vec<Cell>,
}

/// A row skipped because its outcome fields could not be parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhrTable {
    pub columns: Vec<String>,
    pub rows: Vec<EhrRow>,
    pub rejected: Vec<RowDiagnostic>,
}

impl EhrTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn missing_count(&self, column: &str) -> usize {
        self.column_index(column)
            .map(|j| self.rows.iter().filter(|r| r.cells[j].is_missing()).count())
            .unwrap_or(0)
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.patient_id.clone()).collect()
    }
}

fn is_missing_marker(raw: &str) -> bool {
    matches!(
        raw.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "n/a" | "null"
    )
}

fn parse_event(raw: &str) -> Option<bool> {
    match raw.trim() {
        "1" | "1.0" => Some(true),
        "0" | "0.0" => Some(false),
        _ => None,
    }
}

/// Reads an EHR CSV. Outcome columns and every schema column must be present;
/// other columns are ignored.
pub fn parse_ehr_csv(path: impl AsRef<Path>, schema: &EncodingSpec) -> Result<EhrTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    parse_ehr_reader(reader, schema)
}

pub fn parse_ehr_str(text: &str, schema: &EncodingSpec) -> Result<EhrTable> {
    let reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    parse_ehr_reader(reader, schema)
}

fn parse_ehr_reader<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    schema: &EncodingSpec,
) -> Result<EhrTable> {
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = find(ID_COLUMN)?;
    let time_col = find(TIME_COLUMN)?;
    let event_col = find(EVENT_COLUMN)?;
    let cov_cols = schema
        .columns
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let field = |j: usize| record.get(j).unwrap_or("");
        let patient_id = field(id_col).to_string();
        if patient_id.is_empty() {
            rejected.push(RowDiagnostic {
                row: row_no,
                patient_id,
                reason: "empty patient id".into(),
            });
            continue;
        }
        if !seen.insert(patient_id.clone()) {
            return Err(Error::DuplicateId(patient_id));
        }
        let time = field(time_col)
            .parse::<f64>()
            .ok()
            .filter(|t| t.is_finite() && *t > 0.0);
        let event = parse_event(field(event_col));
        let (time, event) = match (time, event) {
            (Some(t), Some(e)) => (t, e),
            _ => {
                rejected.push(RowDiagnostic {
                    row: row_no,
                    patient_id,
                    reason: format!(
                        "unparseable outcome (Time=`{}`, Event=`{}`)",
                        field(time_col),
                        field(event_col)
                    ),
                });
                continue;
            }
        };
        let mut cells = Vec::with_capacity(cov_cols.len());
        for (spec, &j) in schema.columns.iter().zip(&cov_cols) {
            let raw = field(j);
            let cell = if is_missing_marker(raw) {
                Cell::Missing
            } else if spec.encoder.is_numeric() {
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Cell::Number(v),
                    _ => {
                        return Err(Error::MalformedNumeric {
                            row: row_no,
                            column: spec.name.clone(),
                            value: raw.to_string(),
                        })
                    }
                }
            } else {
                Cell::Text(raw.to_string())
            };
            cells.push(cell);
        }
        rows.push(EhrRow {
            patient_id,
            time,
            event,
            cells,
        });
    }
    for d in &rejected {
        log::warn!("row {} (`{}`) rejected: {}", d.row, d.patient_id, d.reason);
    }
    Ok(EhrTable {
        columns: schema.columns.iter().map(|c| c.name.clone()).collect(),
        rows,
        rejected,
    })
}

fn ternary_value(raw: &str, positive: &[String], negative: &[String]) -> Option<f64> {
    let matches = |set: &[String]| set.iter().any(|s| s.eq_ignore_ascii_case(raw));
    if matches(positive) {
        Some(1.0)
    } else if matches(negative) {
        Some(-1.0)
    } else {
        None
    }
}

/// Raw (unstandardized) value of one feature for one cell. `None` marks a
/// missing cell that the caller imputes.
fn raw_feature(
    encoder: &Encoder,
    source: &FeatureSource,
    cell: &Cell,
    column: &str,
    row: usize,
) -> Result<Option<f64>> {
    let text = match cell {
        Cell::Missing => return Ok(None),
        Cell::Number(v) => return Ok(Some(*v)),
        Cell::Text(t) => t.as_str(),
    };
    let bad = || {
        Error::Input(format!(
            "unrecognized value `{text}` in column `{column}` (row {row})"
        ))
    };
    match (encoder, source) {
        (Encoder::Ordinal { map }, _) => map.get(text).copied().map(Some).ok_or_else(bad),
        (Encoder::OneHot { .. }, FeatureSource::Level(level)) => {
            Ok(Some(f64::from(u8::from(text == level))))
        }
        (Encoder::Ternary { positive, negative }, _) => ternary_value(text, positive, negative)
            .map(Some)
            .ok_or_else(bad),
        _ => Err(bad()),
    }
}

fn impute_value(encoder: &Encoder, center: f64) -> f64 {
    match encoder {
        Encoder::Numeric | Encoder::Ordinal { .. } => center,
        Encoder::OneHot { .. } | Encoder::Ternary { .. } => 0.0,
    }
}

fn standardized(encoder: &Encoder) -> bool {
    matches!(encoder, Encoder::Numeric | Encoder::Ordinal { .. })
}

/// Fits the encoding on `table` and returns the encoded cohort with the
/// fitted spec (policy and per-feature statistics filled in).
pub fn encode(
    table: &EhrTable,
    spec: &EncodingSpec,
    policy: MissingPolicy,
) -> Result<(Vec<SurvivalRecord>, EncodingSpec)> {
    let mut kept_columns = Vec::new();
    let mut candidates = Vec::new();
    for col in &spec.columns {
        let j = table
            .column_index(&col.name)
            .ok_or_else(|| Error::MissingColumn(col.name.clone()))?;
        let missing = table
            .rows
            .iter()
            .filter(|r| r.cells[j].is_missing())
            .count();
        if policy == MissingPolicy::Drop && missing > 0 {
            log::info!("dropping column `{}` ({missing} missing cells)", col.name);
            continue;
        }
        let mut col = col.clone();
        let sources = match &mut col.encoder {
            Encoder::OneHot { levels } => {
                let levels = levels.get_or_insert_with(|| {
                    table
                        .rows
                        .iter()
                        .filter_map(|r| match &r.cells[j] {
                            Cell::Text(t) => Some(t.clone()),
                            Cell::Number(v) => Some(v.to_string()),
                            Cell::Missing => None,
                        })
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect()
                });
                levels
                    .iter()
                    .skip(1)
                    .map(|l| FeatureSource::Level(l.clone()))
                    .collect()
            }
            _ => vec![FeatureSource::Value],
        };
        for source in sources {
            candidates.push((col.clone(), j, source));
        }
        kept_columns.push(col);
    }

    let n = table.rows.len();
    let mut features = Vec::new();
    let mut matrix: Vec<Vec<f64>> = Vec::new();
    for (col, j, source) in candidates {
        let raw = table
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| raw_feature(&col.encoder, &source, &r.cells[j], &col.name, i + 1))
            .collect::<Result<Vec<_>>>()?;
        let observed: Vec<f64> = raw.iter().flatten().copied().collect();
        let mean = if observed.is_empty() {
            0.0
        } else {
            observed.iter().sum::<f64>() / observed.len() as f64
        };
        let values: Vec<f64> = raw
            .iter()
            .map(|v| v.unwrap_or_else(|| impute_value(&col.encoder, mean)))
            .collect();
        let full_mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = values.iter().map(|v| (v - full_mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let name = match &source {
            FeatureSource::Value => col.name.clone(),
            FeatureSource::Level(l) => format!("{}={}", col.name, l),
        };
        if !(var > 0.0) {
            log::warn!("dropping zero-variance feature `{name}`");
            continue;
        }
        let (center, scale) = if standardized(&col.encoder) {
            (full_mean, var.sqrt())
        } else {
            (0.0, 1.0)
        };
        features.push(FeatureStat {
            name,
            column: col.name.clone(),
            source,
            center,
            scale,
        });
        matrix.push(values.iter().map(|v| (v - center) / scale).collect());
    }
    if features.is_empty() {
        return Err(Error::EmptyFeatures);
    }

    let records = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let x = matrix.iter().map(|col| col[i]).collect();
            SurvivalRecord::new(r.patient_id.clone(), x, r.time, r.event)
        })
        .collect::<Result<Vec<_>>>()?;
    let fitted = EncodingSpec {
        columns: kept_columns,
        policy: Some(policy),
        features,
    };
    Ok((records, fitted))
}

/// Result of applying a fitted encoding to new data.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub records: Vec<SurvivalRecord>,
    pub warnings: Vec<String>,
}

/// Transforms `table` with training statistics from a fitted spec.
pub fn apply_encoding(table: &EhrTable, fitted: &EncodingSpec) -> Result<Applied> {
    if !fitted.is_fitted() {
        return Err(Error::Config(
            "encoding spec carries no fitted statistics".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut columns = Vec::with_capacity(fitted.features.len());
    for f in &fitted.features {
        let col = fitted.column(&f.column).ok_or_else(|| {
            Error::Config(format!("fitted feature `{}` has no column spec", f.name))
        })?;
        let j = table
            .column_index(&f.column)
            .ok_or_else(|| Error::MissingColumn(f.column.clone()))?;
        columns.push((f, col, j));
    }

    // Unseen one-hot levels are reported once per (row, column).
    for col in &fitted.columns {
        if let Encoder::OneHot {
            levels: Some(levels),
        } = &col.encoder
        {
            let Some(j) = table.column_index(&col.name) else {
                continue;
            };
            for r in &table.rows {
                if let Cell::Text(t) = &r.cells[j] {
                    if !levels.contains(t) {
                        let msg = format!(
                            "patient `{}`: unseen level `{t}` in column `{}`",
                            r.patient_id, col.name
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                    }
                }
            }
        }
    }

    let mut records = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        let mut x = Vec::with_capacity(columns.len());
        for (f, col, j) in &columns {
            let raw = raw_feature(&col.encoder, &f.source, &r.cells[*j], &col.name, i + 1)?;
            let v = match raw {
                Some(v) => v,
                None => {
                    if fitted.policy == Some(MissingPolicy::Drop) {
                        let msg = format!(
                            "patient `{}`: missing `{}` imputed (column was complete in training)",
                            r.patient_id, col.name
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                    }
                    impute_value(&col.encoder, f.center)
                }
            };
            x.push((v - f.center) / f.scale);
        }
        records.push(SurvivalRecord::new(
            r.patient_id.clone(),
            x,
            r.time,
            r.event,
        )?);
    }
    Ok(Applied { records, warnings })
}

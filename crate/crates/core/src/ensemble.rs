//! Weighted averaging of per-patient risks from several models.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::RiskScore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `(r − mean) / sd`, population standard deviation.
    #[default]
    ZScore,
    /// Average ranks mapped linearly onto `[0, 1]`.
    Rank,
    None,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::ZScore),
            "rank" => Ok(Self::Rank),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown normalization `{other}` (zscore|rank|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Member {
    /// Risk CSV or model directory, resolved by the caller.
    pub model: String,
    /// Omitted weights share whatever the explicit ones leave, equally.
    #[serde(default)]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<Member>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl EnsembleSpec {
    pub fn equal(models: &[&str], normalization: Normalization) -> Self {
        Self {
            members: models
                .iter()
                .map(|m| Member {
                    model: m.to_string(),
                    weight: None,
                })
                .collect(),
            normalization,
        }
    }

    /// Resolved weights: non-negative and summing to 1.
    pub fn weights(&self) -> Result<Vec<f64>> {
        if self.members.is_empty() {
            return Err(Error::Config("ensemble has no members".into()));
        }
        let explicit: f64 = self.members.iter().filter_map(|m| m.weight).sum();
        let open = self.members.iter().filter(|m| m.weight.is_none()).count();
        if self
            .members
            .iter()
            .filter_map(|m| m.weight)
            .any(|w| !(w >= 0.0) || !w.is_finite())
        {
            return Err(Error::Config(
                "ensemble weights must be finite and non-negative".into(),
            ));
        }
        let share = if open == 0 {
            0.0
        } else {
            if explicit > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "explicit weights sum to {explicit} > 1"
                )));
            }
            (1.0 - explicit).max(0.0) / open as f64
        };
        let w: Vec<f64> = self
            .members
            .iter()
            .map(|m| m.weight.unwrap_or(share))
            .collect();
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ensemble weights sum to {total}, expected 1"
            )));
        }
        Ok(w)
    }
}

pub fn standardize_risks(risks: &[RiskScore], method: Normalization) -> Result<Vec<RiskScore>> {
    let values: Vec<f64> = risks.iter().map(|r| r.value).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("risk scores".into()));
    }
    let out = match method {
        Normalization::None => values,
        Normalization::ZScore => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if values.len() < 2 || !(sd > 0.0) {
                return Err(Error::ConstantRisks);
            }
            values.iter().map(|v| (v - mean) / sd).collect()
        }
        Normalization::Rank => average_ranks(&values),
    };
    Ok(risks
        .iter()
        .zip(out)
        .map(|(r, v)| RiskScore::new(r.patient_id.clone(), v))
        .collect())
}

/// Zero-based average ranks divided by `n − 1`; a single value maps to 0.5.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 1 {
        return vec![0.5];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 / (n - 1) as f64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Per-patient weighted mean of the normalized member risks, in the first
/// member's patient order.
pub fn average_risks(members: &[Vec<RiskScore>], spec: &EnsembleSpec) -> Result<Vec<RiskScore>> {
    let weights = spec.weights()?;
    if members.len() != weights.len() {
        return Err(Error::Config(format!(
            "ensemble spec lists {} members, got {} risk sets",
            weights.len(),
            members.len()
        )));
    }
    let first = &members[0];
    let mut index = HashMap::with_capacity(first.len());
    for (i, r) in first.iter().enumerate() {
        if index.insert(r.patient_id.as_str(), i).is_some() {
            return Err(Error::DuplicateId(r.patient_id.clone()));
        }
    }
    let mut acc = vec![0.0; first.len()];
    for (risks, &w) in members.iter().zip(&weights) {
        check_same_patients(first, risks)?;
        for r in standardize_risks(risks, spec.normalization)? {
            acc[index[r.patient_id.as_str()]] += w * r.value;
        }
    }
    Ok(first
        .iter()
        .zip(acc)
        .map(|(r, v)| RiskScore::new(r.patient_id.clone(), v))
        .collect())
}

fn check_same_patients(a: &[RiskScore], b: &[RiskScore]) -> Result<()> {
    let ids = |s: &[RiskScore]| -> Result<BTreeSet<String>> {
        let mut set = BTreeSet::new();
        for r in s {
            if !set.insert(r.patient_id.clone()) {
                return Err(Error::DuplicateId(r.patient_id.clone()));
            }
        }
        Ok(set)
    };
    let (a, b) = (ids(a)?, ids(b)?);
    let missing: Vec<String> = a.symmetric_difference(&b).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::PatientMismatch(missing))
    }
}

#[derive(Serialize, Deserialize)]
struct RiskRow {
    #[serde(rename = "PatientID")]
    patient_id: String,
    #[serde(rename = "Risk")]
    risk: f64,
}

/// `PatientID,Risk` rows.
pub fn write_risks(path: impl AsRef<Path>, risks: &[RiskScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in risks {
        w.serialize(RiskRow {
            patient_id: r.patient_id.clone(),
            risk: r.value,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_risks(path: impl AsRef<Path>) -> Result<Vec<RiskScore>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<RiskRow>() {
        let row = row?;
        if !row.risk.is_finite() {
            return Err(Error::NonFinite(format!("risk of {}", row.patient_id)));
        }
        out.push(RiskScore::new(row.patient_id, row.risk));
    }
    Ok(out)
}

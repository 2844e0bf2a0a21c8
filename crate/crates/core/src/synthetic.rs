//! Seeded synthetic cohorts with known ground truth: standard-normal
//! covariates, exponential proportional-hazards event times, independent
//! uniform censoring, and optional CT/PET volumes whose blob radius grows
//! with the true risk.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::survival::SurvivalRecord;
use crate::tabular::{ColumnSpec, Encoder, EncodingSpec, EVENT_COLUMN, ID_COLUMN, TIME_COLUMN};
use crate::volume::{save_bounding_boxes, BoundingBox, PatientFiles, Shape3, Volume};

/// Spherical blob volumes: radius `r_min + (r_max − r_min)·σ(η)` for true
/// linear predictor `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobSpec {
    pub shape: Shape3,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Blob intensity above background.
    pub contrast: f64,
    pub background: f64,
    pub noise_sd: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            shape: Shape3::new(16, 24, 24),
            radius_min: 1.5,
            radius_max: 7.0,
            contrast: 1.0,
            background: 0.0,
            noise_sd: 0.1,
        }
    }
}

impl BlobSpec {
    pub fn radius(&self, eta: f64) -> f64 {
        self.radius_min + (self.radius_max - self.radius_min) / (1.0 + (-eta).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub beta_true: Vec<f64>,
    /// Baseline exponential rate.
    pub lambda: f64,
    /// Censoring times are `Uniform(0, c_max)`; `None` leaves every event observed.
    pub c_max: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub volumes: Option<BlobSpec>,
}

impl SyntheticSpec {
    pub fn new(n: usize, beta_true: Vec<f64>, seed: u64) -> Self {
        Self {
            n,
            beta_true,
            lambda: 0.1,
            c_max: None,
            seed,
            volumes: None,
        }
    }

    pub fn d(&self) -> usize {
        self.beta_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.beta_true.is_empty() {
            return Err(Error::Config(
                "synthetic cohort needs n > 0 and d > 0".into(),
            ));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if let Some(c) = self.c_max {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("c_max must be positive, got {c}")));
            }
        }
        if let Some(b) = &self.volumes {
            if b.shape.is_empty()
                || !(b.radius_min >= 0.0 && b.radius_max >= b.radius_min)
                || !(b.noise_sd >= 0.0)
            {
                return Err(Error::Config("invalid blob volume settings".into()));
            }
        }
        Ok(())
    }
}

/// Generated cohort with the true linear predictors and latent times.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub records: Vec<SurvivalRecord>,
    pub eta: Vec<f64>,
    pub event_times: Vec<f64>,
}

impl SyntheticCohort {
    pub fn censored_fraction(&self) -> f64 {
        self.records.iter().filter(|r| !r.event).count() as f64 / self.records.len() as f64
    }
}

pub fn patient_id(i: usize) -> String {
    format!("SYN-{i:04}")
}

/// Patient `i` draws from its own stream, so cohorts of different size
/// share their common prefix.
pub fn generate_tabular(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n);
    let mut eta = Vec::with_capacity(spec.n);
    let mut event_times = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_for(spec.seed, &[0x7AB, i as u64]);
        let x: Vec<f64> = (0..spec.d()).map(|_| rng.sample(StandardNormal)).collect();
        let lp: f64 = x.iter().zip(&spec.beta_true).map(|(a, b)| a * b).sum();
        let u: f64 = 1.0 - rng.gen::<f64>();
        let t = -u.ln() / (spec.lambda * lp.exp());
        let c = spec.c_max.map(|c| rng.gen_range(0.0..c));
        let (time, event) = match c {
            Some(c) if c < t => (c, false),
            _ => (t, true),
        };
        // Zero-length follow-up is not a valid record; such draws have probability zero.
        let time = time.max(f64::MIN_POSITIVE);
        records.push(SurvivalRecord::new(patient_id(i), x, time, event)?);
        eta.push(lp);
        event_times.push(t);
    }
    Ok(SyntheticCohort {
        records,
        eta,
        event_times,
    })
}

/// `c_max` giving the requested expected censoring fraction, found by
/// bisection on `E[min(T, c) / c]` over a seeded reference sample of event
/// times.
pub fn calibrate_c_max(spec: &SyntheticSpec, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!(
            "censoring fraction must be in (0, 1), got {target}"
        )));
    }
    let reference = SyntheticSpec {
        n: spec.n.max(20_000),
        c_max: None,
        volumes: None,
        ..spec.clone()
    };
    let times = generate_tabular(&reference)?.event_times;
    let fraction = |c: f64| times.iter().map(|t| t.min(c) / c).sum::<f64>() / times.len() as f64;
    let (mut lo, mut hi) = (1e-12, 1.0);
    while fraction(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One patient's generated scan pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub ct: Volume,
    pub pet: Volume,
}

/// Centered blob of the given radius plus independent noise per modality.
pub fn blob_pair(spec: &BlobSpec, eta: f64, seed: u64, patient: usize) -> VolumePair {
    let s = spec.shape;
    let r = spec.radius(eta);
    let center = [s.d, s.h, s.w].map(|n| (n as f64 - 1.0) / 2.0);
    let mut base = vec![spec.background; s.len()];
    for z in 0..s.d {
        for y in 0..s.h {
            for x in 0..s.w {
                let d2 = (z as f64 - center[0]).powi(2)
                    + (y as f64 - center[1]).powi(2)
                    + (x as f64 - center[2]).powi(2);
                if d2 <= r * r {
                    base[(z * s.h + y) * s.w + x] += spec.contrast;
                }
            }
        }
    }
    let noisy = |modality: u64| {
        let mut data = base.clone();
        if spec.noise_sd > 0.0 {
            let mut rng = rng_for(seed, &[0xB10B, patient as u64, modality]);
            for v in &mut data {
                *v += spec.noise_sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Volume::new(s, [1.0; 3], [0.0; 3], data).expect("blob volume shape")
    };
    VolumePair {
        ct: noisy(0),
        pet: noisy(1),
    }
}

pub fn generate_volumes(cohort: &SyntheticCohort, spec: &SyntheticSpec) -> Result<Vec<VolumePair>> {
    let blob = spec
        .volumes
        .as_ref()
        .ok_or_else(|| Error::Config("volume generation requires a blob spec".into()))?;
    Ok(cohort
        .eta
        .iter()
        .enumerate()
        .map(|(i, &eta)| blob_pair(blob, eta, spec.seed, i))
        .collect())
}

pub const EHR_FILE: &str = "ehr.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const BBOX_FILE: &str = "bbox.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const VOLUME_DIR: &str = "volumes";

pub fn covariate_name(j: usize) -> String {
    format!("x{}", j + 1)
}

/// Numeric schema for the generated covariate columns.
pub fn schema(d: usize) -> EncodingSpec {
    EncodingSpec::new(
        (0..d)
            .map(|j| ColumnSpec {
                name: covariate_name(j),
                encoder: Encoder::Numeric,
            })
            .collect(),
    )
}

/// Writes `ehr.csv`, `schema.json`, `truth.csv` and, when present, the
/// volumes under `volumes/` with a whole-volume `bbox.csv`.
pub fn write_cohort(
    dir: impl AsRef<Path>,
    cohort: &SyntheticCohort,
    volumes: Option<&[VolumePair]>,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let d = cohort.records.first().map(|r| r.dim()).unwrap_or(0);

    let mut w = csv::Writer::from_path(dir.join(EHR_FILE))?;
    let mut header = vec![
        ID_COLUMN.to_string(),
        TIME_COLUMN.to_string(),
        EVENT_COLUMN.to_string(),
    ];
    header.extend((0..d).map(covariate_name));
    w.write_record(&header)?;
    for r in &cohort.records {
        let mut row = vec![
            r.patient_id.clone(),
            r.time.to_string(),
            u8::from(r.event).to_string(),
        ];
        row.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    std::fs::write(
        dir.join(SCHEMA_FILE),
        serde_json::to_string_pretty(&schema(d))?,
    )?;

    let mut w = csv::Writer::from_path(dir.join(TRUTH_FILE))?;
    w.write_record([ID_COLUMN, "Eta", "EventTime"])?;
    for ((r, eta), t) in cohort
        .records
        .iter()
        .zip(&cohort.eta)
        .zip(&cohort.event_times)
    {
        w.write_record([r.patient_id.clone(), eta.to_string(), t.to_string()])?;
    }
    w.flush()?;

    if let Some(volumes) = volumes {
        if volumes.len() != cohort.records.len() {
            return Err(Error::Input(format!(
                "{} volume pairs for {} patients",
                volumes.len(),
                cohort.records.len()
            )));
        }
        let vdir = dir.join(VOLUME_DIR);
        std::fs::create_dir_all(&vdir)?;
        let mut boxes = std::collections::BTreeMap::new();
        for (r, pair) in cohort.records.iter().zip(volumes) {
            PatientFiles::new(&vdir, &r.patient_id).save(&pair.ct, &pair.pet)?;
            boxes.insert(
                r.patient_id.clone(),
                BoundingBox::new([0; 3], pair.ct.shape.axes())?,
            );
        }
        save_bounding_boxes(dir.join(BBOX_FILE), &boxes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_cohort() {
        let mut spec = SyntheticSpec::new(50, vec![1.0, -0.5], 3);
        spec.c_max = Some(20.0);
        assert_eq!(
            generate_tabular(&spec).unwrap(),
            generate_tabular(&spec).unwrap()
        );
        let mut other = spec.clone();
        other.seed = 4;
        assert_ne!(
            generate_tabular(&spec).unwrap(),
            generate_tabular(&other).unwrap()
        );
    }

    #[test]
    fn prefix_stability() {
        let small = generate_tabular(&SyntheticSpec::new(10, vec![0.3], 1)).unwrap();
        let large = generate_tabular(&SyntheticSpec::new(30, vec![0.3], 1)).unwrap();
        assert_eq!(small.records[..], large.records[..10]);
    }

    #[test]
    fn no_censoring_without_c_max() {
        let c = generate_tabular(&SyntheticSpec::new(100, vec![0.3], 1)).unwrap();
        assert!(c.records.iter().all(|r| r.event));
        assert_eq!(c.censored_fraction(), 0.0);
    }

    #[test]
    fn invalid_specs() {
        let mut s = SyntheticSpec::new(10, vec![1.0], 0);
        s.lambda = 0.0;
        assert!(generate_tabular(&s).is_err());
        s.lambda = 1.0;
        s.c_max = Some(-1.0);
        assert!(generate_tabular(&s).is_err());
        assert!(generate_tabular(&SyntheticSpec::new(0, vec![1.0], 0)).is_err());
    }

    #[test]
    fn noiseless_equal_risk_gives_identical_volumes() {
        let spec = BlobSpec {
            noise_sd: 0.0,
            ..BlobSpec::default()
        };
        assert_eq!(blob_pair(&spec, 0.4, 1, 0), blob_pair(&spec, 0.4, 9, 5));
        let p = blob_pair(&spec, 0.4, 1, 0);
        assert_eq!(p.ct, p.pet);
    }

    #[test]
    fn modalities_get_independent_noise() {
        let p = blob_pair(&BlobSpec::default(), 0.0, 1, 0);
        assert_ne!(p.ct, p.pet);
    }
}

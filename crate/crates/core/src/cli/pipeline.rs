//! Data loading, model training and persistence shared by the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ModelKind, RunConfig};
use crate::coxph::{fit_cox_named, CoxModel};
use crate::ensemble::{average_risks, EnsembleSpec, Member};
use crate::error::{Error, Result};
use crate::fusion::{self, build_model, FusionConfig, FusionModel, FusionSample, TrainOptions};
use crate::mtlr::{
    fit_mtlr, fit_neural_mtlr, predict_risks, predict_survival_curve, MtlrParams, NeuralMtlrModel,
};
use crate::rng::rng_for;
use crate::survival::{
    concordance, make_time_grid, Concordance, RiskScore, SurvivalCurve, SurvivalRecord,
};
use crate::tabular::{
    apply_encoding, encode, parse_ehr_csv, EhrTable, EncodingSpec, MissingPolicy,
};
use crate::volume::{load_bounding_boxes, preprocess, BoundingBox, PatientFiles, PreprocessConfig};

pub const MANIFEST_FILE: &str = "model.json";
pub const ENCODING_FILE: &str = "encoding.json";
pub const RISKS_FILE: &str = "risks.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_FILE: &str = "loss.csv";

/// Encoded cohort plus, for image models, the network-ready samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SurvivalRecord>,
    pub feature_names: Vec<String>,
    pub samples: Option<Vec<FusionSample>>,
}

impl Dataset {
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            samples: self
                .samples
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("`{what}` is not set")))
}

/// Parses `data.ehr` against `fitted` or, without it, the `data.schema` file.
pub fn read_table(
    data: &DataConfig,
    fitted: Option<&EncodingSpec>,
) -> Result<(EhrTable, EncodingSpec)> {
    let ehr = require(&data.ehr, "data.ehr")?;
    let schema = match fitted {
        Some(f) => f.clone(),
        None => EncodingSpec::from_json_file(require(&data.schema, "data.schema")?)?,
    };
    let table = parse_ehr_csv(ehr, &schema)?;
    for d in &table.rejected {
        log::warn!("row {} ({}): {}", d.row, d.patient_id, d.reason);
    }
    Ok((table, schema))
}

/// Applies a fitted `spec`, or fits it on `table` under `policy`.
pub fn encode_table(
    table: &EhrTable,
    spec: &EncodingSpec,
    policy: MissingPolicy,
) -> Result<(Vec<SurvivalRecord>, EncodingSpec)> {
    if spec.is_fitted() {
        let applied = apply_encoding(table, spec)?;
        for w in &applied.warnings {
            log::warn!("{w}");
        }
        Ok((applied.records, spec.clone()))
    } else {
        encode(table, spec, policy)
    }
}

pub fn feature_names(spec: &EncodingSpec) -> Vec<String> {
    spec.features.iter().map(|f| f.name.clone()).collect()
}

/// Loads, box-crops, normalizes and fuses every patient's scans.
pub fn load_samples(
    data: &DataConfig,
    records: &[SurvivalRecord],
    fusion: &FusionConfig,
    pre: Option<&PreprocessConfig>,
) -> Result<Vec<FusionSample>> {
    let dir = require(&data.volumes, "data.volumes")?;
    let boxes: Option<BTreeMap<String, BoundingBox>> =
        data.bbox.as_ref().map(load_bounding_boxes).transpose()?;
    records
        .iter()
        .map(|r| {
            let (ct, pet) = PatientFiles::new(dir, &r.patient_id).load()?;
            let b = match &boxes {
                Some(map) => Some(*map.get(&r.patient_id).ok_or_else(|| {
                    Error::Input(format!("no bounding box for `{}`", r.patient_id))
                })?),
                None => None,
            };
            let cfg = match pre {
                Some(p) => p.clone(),
                None => PreprocessConfig {
                    box_target: b.map(|b| b.extent()).unwrap_or(ct.shape),
                    crop: fusion.input,
                    ..PreprocessConfig::default()
                },
            };
            let images = preprocess(&ct, &pet, b.as_ref(), &cfg)?;
            Ok(FusionSample::from_prepared(
                r.clone(),
                images,
                fusion.variant,
            ))
        })
        .collect()
}

/// Reads and encodes the cohort named by `data`, with images when asked.
pub fn load_dataset(
    data: &DataConfig,
    fitted: Option<&EncodingSpec>,
    images: Option<(&FusionConfig, Option<&PreprocessConfig>)>,
) -> Result<(Dataset, EncodingSpec)> {
    let (table, schema) = read_table(data, fitted)?;
    let (records, spec) = encode_table(&table, &schema, data.policy())?;
    let samples = images
        .map(|(f, p)| load_samples(data, &records, f, p))
        .transpose()?;
    Ok((
        Dataset {
            records,
            feature_names: feature_names(&spec),
            samples,
        },
        spec,
    ))
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub spec: EnsembleSpec,
    pub members: Vec<TrainedModel>,
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Cox(CoxModel),
    Mtlr(MtlrParams),
    NeuralMtlr(NeuralMtlrModel),
    Fusion(FusionModel),
    Ensemble(EnsembleModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Cox(_) => ModelKind::Cox,
            TrainedModel::Mtlr(_) => ModelKind::Mtlr,
            TrainedModel::NeuralMtlr(_) => ModelKind::NeuralMtlr,
            TrainedModel::Fusion(m) => match m.config.variant {
                fusion::Variant::V1 => ModelKind::DeepFusionV1,
                fusion::Variant::V2 => ModelKind::DeepFusionV2,
            },
            TrainedModel::Ensemble(_) => ModelKind::Ensemble,
        }
    }

    pub fn needs_images(&self) -> bool {
        match self {
            TrainedModel::Fusion(_) => true,
            TrainedModel::Ensemble(e) => e.members.iter().any(TrainedModel::needs_images),
            _ => false,
        }
    }

    /// Fusion config of the first image member, if any.
    pub fn fusion_config(&self) -> Option<&FusionConfig> {
        match self {
            TrainedModel::Fusion(m) => Some(&m.config),
            TrainedModel::Ensemble(e) => e.members.iter().find_map(TrainedModel::fusion_config),
            _ => None,
        }
    }

    pub fn predict_risks(&self, data: &Dataset) -> Result<Vec<RiskScore>> {
        match self {
            TrainedModel::Cox(m) => m.predict_risk(&data.records),
            TrainedModel::Mtlr(p) => predict_risks(p, &data.records),
            TrainedModel::NeuralMtlr(m) => m.predict_risks(&data.records),
            TrainedModel::Fusion(m) => m.predict_risks(images(data)?),
            TrainedModel::Ensemble(e) => {
                let members = e
                    .members
                    .iter()
                    .map(|m| m.predict_risks(data))
                    .collect::<Result<Vec<_>>>()?;
                average_risks(&members, &e.spec)
            }
        }
    }

    /// Predicted survival curve per patient, in cohort order.
    pub fn survival_curves(&self, data: &Dataset) -> Result<Vec<SurvivalCurve>> {
        match self {
            TrainedModel::Cox(m) => data
                .records
                .iter()
                .map(|r| m.survival_curve(&r.covariates))
                .collect(),
            TrainedModel::Mtlr(p) => data
                .records
                .iter()
                .map(|r| predict_survival_curve(p, &r.covariates))
                .collect(),
            TrainedModel::NeuralMtlr(m) => data
                .records
                .iter()
                .map(|r| m.predict_survival_curve(r))
                .collect(),
            TrainedModel::Fusion(m) => m.predict_survival_curves(images(data)?),
            TrainedModel::Ensemble(_) => Err(Error::Config(
                "an ensemble averages risks and has no survival curve".into(),
            )),
        }
    }
}

fn images(data: &Dataset) -> Result<&[FusionSample]> {
    data.samples
        .as_deref()
        .ok_or_else(|| Error::Config("image model needs `data.volumes`".into()))
}

/// A fitted model with its training trace as CSV rows (header first).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub trace: Vec<Vec<String>>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Ensemble members: model kinds are trained in place, anything else is a
/// trained model directory.
pub fn member_source(m: &Member) -> Result<MemberSource> {
    match ModelKind::parse(&m.model) {
        Some(ModelKind::Ensemble) => Err(Error::Config("ensembles cannot be nested".into())),
        Some(kind) => Ok(MemberSource::Train(kind)),
        None => Ok(MemberSource::Load(PathBuf::from(&m.model))),
    }
}

pub enum MemberSource {
    Train(ModelKind),
    Load(PathBuf),
}

pub fn kind_needs_images(kind: ModelKind, cfg: &RunConfig) -> Result<bool> {
    Ok(match kind {
        ModelKind::DeepFusionV1 | ModelKind::DeepFusionV2 => true,
        ModelKind::Ensemble => {
            let spec = ensemble_spec(cfg)?;
            let mut any = false;
            for m in &spec.members {
                any |= match member_source(m)? {
                    MemberSource::Train(k) => kind_needs_images(k, cfg)?,
                    MemberSource::Load(dir) => load_model(&dir)?.needs_images(),
                };
            }
            any
        }
        _ => false,
    })
}

fn ensemble_spec(cfg: &RunConfig) -> Result<&EnsembleSpec> {
    cfg.ensemble
        .as_ref()
        .ok_or_else(|| Error::Config("model `ensemble` needs an `ensemble` section".into()))
}

/// Fusion config for image loading: the first image member's.
pub fn image_config(kind: ModelKind, cfg: &RunConfig) -> Result<FusionConfig> {
    if let Some(v) = kind.variant() {
        let mut f = cfg.fusion.clone();
        f.variant = v;
        return Ok(f);
    }
    if kind == ModelKind::Ensemble {
        for m in &ensemble_spec(cfg)?.members {
            match member_source(m)? {
                MemberSource::Train(k) if k.variant().is_some() => return image_config(k, cfg),
                MemberSource::Load(dir) => {
                    if let Some(f) = load_model(&dir)?.fusion_config() {
                        return Ok(f.clone());
                    }
                }
                _ => {}
            }
        }
    }
    Ok(cfg.fusion.clone())
}

pub fn train_model(
    kind: ModelKind,
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
) -> Result<TrainOutcome> {
    let mut extra = BTreeMap::new();
    let (model, trace) = match kind {
        ModelKind::Cox => {
            let m = fit_cox_named(&data.records, data.feature_names.clone(), &cfg.cox)?;
            extra.insert("converged".into(), m.report.converged.into());
            extra.insert("iterations".into(), m.report.iterations.into());
            let trace = numbered("iteration,objective", &m.report.trace, 0);
            (TrainedModel::Cox(m), trace)
        }
        ModelKind::Mtlr => {
            let grid = make_time_grid(&data.records, cfg.grid)?;
            let fit = fit_mtlr(&data.records, &grid, &cfg.mtlr)?;
            (
                TrainedModel::Mtlr(fit.params),
                numbered("epoch,loss", &fit.loss_trace, 1),
            )
        }
        ModelKind::NeuralMtlr => {
            let grid = make_time_grid(&data.records, cfg.grid)?;
            let fit = fit_neural_mtlr(&data.records, &grid, &cfg.neural_mtlr)?;
            (
                TrainedModel::NeuralMtlr(fit.model),
                numbered("epoch,loss", &fit.loss_trace, 1),
            )
        }
        ModelKind::DeepFusionV1 | ModelKind::DeepFusionV2 => {
            let samples = images(data)?;
            let grid = make_time_grid(&data.records, cfg.grid)?;
            let fcfg = cfg.fusion_for(kind);
            let ehr_dim = data.records.first().map(|r| r.dim()).unwrap_or(0);
            let model = build_model(&fcfg, ehr_dim, grid)?;
            let opts = TrainOptions {
                validation: None,
                checkpoint_on_failure: Some(out.join("last_good")),
            };
            let fit = fusion::train(model, samples, &opts)?;
            let mut trace = vec![vec!["epoch".into(), "loss".into(), "val_c_index".into()]];
            for l in &fit.log {
                let c = l.val_c_index.map(|c| c.to_string()).unwrap_or_default();
                trace.push(vec![l.epoch.to_string(), l.loss.to_string(), c]);
            }
            (TrainedModel::Fusion(fit.model), trace)
        }
        ModelKind::Ensemble => {
            let spec = ensemble_spec(cfg)?.clone();
            let mut members = Vec::with_capacity(spec.members.len());
            for (i, m) in spec.members.iter().enumerate() {
                let member = match member_source(m)? {
                    MemberSource::Train(k) => {
                        let dir = out.join(member_dir(i, k));
                        let outcome = train_model(k, cfg, data, &dir)?;
                        save_model(&dir, &outcome.model, cfg.preprocess.as_ref())?;
                        write_trace(&dir.join(LOSS_FILE), &outcome.trace)?;
                        outcome.model
                    }
                    MemberSource::Load(dir) => {
                        let theirs = EncodingSpec::from_json_file(dir.join(ENCODING_FILE))?;
                        if feature_names(&theirs) != data.feature_names {
                            return Err(Error::Config(format!(
                                "member {} was trained on different features",
                                dir.display()
                            )));
                        }
                        load_model(&dir)?
                    }
                };
                members.push(member);
            }
            spec.weights()?;
            (
                TrainedModel::Ensemble(EnsembleModel { spec, members }),
                Vec::new(),
            )
        }
    };
    Ok(TrainOutcome {
        model,
        trace,
        extra,
    })
}

fn member_dir(i: usize, kind: ModelKind) -> String {
    format!("member{i}-{}", kind.name())
}

fn numbered(header: &str, values: &[f64], start: usize) -> Vec<Vec<String>> {
    let mut rows = vec![header.split(',').map(String::from).collect()];
    rows.extend(
        values
            .iter()
            .enumerate()
            .map(|(i, v)| vec![(i + start).to_string(), v.to_string()]),
    );
    rows
}

pub fn write_trace(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub preprocess: Option<PreprocessConfig>,
    /// Ensemble only: member directories relative to the model directory.
    #[serde(default)]
    pub members: Vec<String>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("no model at {}: {e}", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

const COX_FILE: &str = "cox.json";
const MTLR_FILE: &str = "mtlr.json";
const NEURAL_FILE: &str = "neural_mtlr.json";
const FUSION_STEM: &str = "fusion";

/// Writes the model files and manifest into `dir`. Ensemble members loaded
/// from elsewhere are copied in as subdirectories.
pub fn save_model(dir: &Path, model: &TrainedModel, pre: Option<&PreprocessConfig>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        kind: model.kind(),
        feature_names: Vec::new(),
        preprocess: pre.cloned(),
        members: Vec::new(),
        ensemble: None,
    };
    match model {
        TrainedModel::Cox(m) => {
            manifest.feature_names = m.feature_names.clone();
            m.save_json(dir.join(COX_FILE))?;
        }
        TrainedModel::Mtlr(p) => p.save_json(dir.join(MTLR_FILE))?,
        TrainedModel::NeuralMtlr(m) => m.save_json(dir.join(NEURAL_FILE))?,
        TrainedModel::Fusion(m) => m.save(dir.join(FUSION_STEM), m.config.train.epochs as u64)?,
        TrainedModel::Ensemble(e) => {
            for (i, m) in e.members.iter().enumerate() {
                let name = member_dir(i, m.kind());
                let sub = dir.join(&name);
                if !sub.join(MANIFEST_FILE).exists() {
                    save_model(&sub, m, pre)?;
                }
                manifest.members.push(name);
            }
            manifest.ensemble = Some(e.spec.clone());
        }
    }
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let manifest = read_manifest(dir)?;
    Ok(match manifest.kind {
        ModelKind::Cox => TrainedModel::Cox(CoxModel::load_json(dir.join(COX_FILE))?),
        ModelKind::Mtlr => TrainedModel::Mtlr(MtlrParams::load_json(dir.join(MTLR_FILE))?),
        ModelKind::NeuralMtlr => {
            TrainedModel::NeuralMtlr(NeuralMtlrModel::load_json(dir.join(NEURAL_FILE))?)
        }
        ModelKind::DeepFusionV1 | ModelKind::DeepFusionV2 => {
            TrainedModel::Fusion(FusionModel::load(dir.join(FUSION_STEM))?)
        }
        ModelKind::Ensemble => {
            let spec = manifest
                .ensemble
                .ok_or_else(|| Error::Config("ensemble manifest lacks its spec".into()))?;
            let members = manifest
                .members
                .iter()
                .map(|m| load_model(&dir.join(m)))
                .collect::<Result<Vec<_>>>()?;
            TrainedModel::Ensemble(EnsembleModel { spec, members })
        }
    })
}

/// Fold of each patient: a seeded shuffle dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[0xF01D]));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Validation C-index per fold. The encoding is refit on each training
/// split and applied to its held-out split.
pub fn cross_validate(
    kind: ModelKind,
    cfg: &RunConfig,
    table: &EhrTable,
    schema: &EncodingSpec,
    k: usize,
) -> Result<Vec<f64>> {
    if k < 2 || k > table.rows.len() {
        return Err(Error::Config(format!(
            "need 2 <= folds <= {} patients, got {k}",
            table.rows.len()
        )));
    }
    let images = if kind_needs_images(kind, cfg)? {
        Some(image_config(kind, cfg)?)
    } else {
        None
    };
    let folds = fold_assignment(table.rows.len(), k, cfg.seed);
    let scratch = tempdir_in(&cfg.out)?;
    let mut scores = Vec::with_capacity(k);
    for f in 0..k {
        let split = |held: bool| EhrTable {
            columns: table.columns.clone(),
            rows: table
                .rows
                .iter()
                .zip(&folds)
                .filter(|(_, &g)| (g == f) == held)
                .map(|(r, _)| r.clone())
                .collect(),
            rejected: Vec::new(),
        };
        let (train_records, spec) = encode_table(&split(false), schema, cfg.data.policy())?;
        let (val_records, _) = encode_table(&split(true), &spec, cfg.data.policy())?;
        let dataset = |records: Vec<SurvivalRecord>| -> Result<Dataset> {
            let samples = match &images {
                Some(fc) => Some(load_samples(
                    &cfg.data,
                    &records,
                    fc,
                    cfg.preprocess.as_ref(),
                )?),
                None => None,
            };
            Ok(Dataset {
                records,
                feature_names: feature_names(&spec),
                samples,
            })
        };
        let train = dataset(train_records)?;
        let val = dataset(val_records)?;
        let outcome = train_model(kind, cfg, &train, &scratch.join(format!("fold{f}")))?;
        let risks = outcome.model.predict_risks(&val)?;
        scores.push(concordance(&risks, &val.records)?.c_index);
    }
    let _ = std::fs::remove_dir_all(&scratch);
    Ok(scores)
}

fn tempdir_in(out: &Path) -> Result<PathBuf> {
    let dir = out.join(".cv");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub model: ModelKind,
    pub n: usize,
    pub events: usize,
    pub c_index: f64,
    pub comparable_pairs: u64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Metrics {
    pub fn new(model: ModelKind, records: &[SurvivalRecord], c: &Concordance) -> Self {
        Self {
            model,
            n: records.len(),
            events: records.iter().filter(|r| r.event).count(),
            c_index: c.c_index,
            comparable_pairs: c.comparable_pairs,
            extra: BTreeMap::new(),
        }
    }
}

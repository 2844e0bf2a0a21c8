//! Run configuration: one JSON document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coxph::CoxConfig;
use crate::ensemble::EnsembleSpec;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, Variant};
use crate::mtlr::{MtlrConfig, NeuralMtlrConfig};
use crate::survival::GridSize;
use crate::synthetic::BlobSpec;
use crate::tabular::MissingPolicy;
use crate::volume::PreprocessConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Cox,
    Mtlr,
    NeuralMtlr,
    DeepFusionV1,
    DeepFusionV2,
    Ensemble,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cox => "cox",
            ModelKind::Mtlr => "mtlr",
            ModelKind::NeuralMtlr => "neural-mtlr",
            ModelKind::DeepFusionV1 => "deep-fusion-v1",
            ModelKind::DeepFusionV2 => "deep-fusion-v2",
            ModelKind::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        <Self as clap::ValueEnum>::from_str(s, false).ok()
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::DeepFusionV1 => Some(Variant::V1),
            ModelKind::DeepFusionV2 => Some(Variant::V2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// EHR CSV with `PatientID,Time,Event` and the schema columns.
    pub ehr: Option<PathBuf>,
    /// Column schema JSON; ignored when a fitted encoding comes with a model.
    pub schema: Option<PathBuf>,
    pub policy: Option<MissingPolicy>,
    /// Directory of `<id>_ct.f32`, `<id>_pet.f32`, `<id>.json`.
    pub volumes: Option<PathBuf>,
    /// `PatientID,x1,y1,z1,x2,y2,z2`; without it the whole scan is the box.
    pub bbox: Option<PathBuf>,
}

impl DataConfig {
    pub fn policy(&self) -> MissingPolicy {
        self.policy.unwrap_or(MissingPolicy::Impute)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub beta_true: Vec<f64>,
    pub lambda: f64,
    /// Explicit censoring bound; overrides `censored_fraction`.
    pub c_max: Option<f64>,
    /// Target censored fraction, reached by calibrating `c_max`.
    pub censored_fraction: Option<f64>,
    pub volumes: Option<BlobSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n: 200,
            beta_true: vec![1.0, -0.5, 0.0],
            lambda: 0.1,
            c_max: None,
            censored_fraction: Some(0.3),
            volumes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub c_reg: Vec<f64>,
    pub lr: Vec<f64>,
    pub folds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            c_reg: vec![0.1, 1.0, 10.0],
            lr: vec![0.016],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    /// Trained model directory.
    pub model: Option<PathBuf>,
    /// Patients whose predicted curves are drawn; empty means the first five.
    pub patients: Vec<String>,
    /// Cox covariate for partial effects; `None` skips them.
    pub covariate: Option<String>,
    /// Covariate values (standardized scale) for the partial-effect curves.
    pub values: Vec<f64>,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            model: None,
            patients: Vec::new(),
            covariate: None,
            values: vec![-1.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// `PatientID,Risk` CSV.
    pub risks: Option<PathBuf>,
    /// Outcome CSV; defaults to `data.ehr`.
    pub outcomes: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Copied into every module seed during resolution.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub grid: GridSize,
    pub cox: CoxConfig,
    pub mtlr: MtlrConfig,
    pub neural_mtlr: NeuralMtlrConfig,
    pub fusion: FusionConfig,
    /// Image preprocessing; by default each box is kept at its own extent and
    /// center-cropped to the fusion input shape.
    pub preprocess: Option<PreprocessConfig>,
    pub ensemble: Option<EnsembleSpec>,
    pub simulate: SimulateConfig,
    pub sweep: SweepConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::default(),
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            grid: GridSize::Auto,
            cox: CoxConfig::default(),
            mtlr: MtlrConfig::default(),
            neural_mtlr: NeuralMtlrConfig::default(),
            fusion: FusionConfig::default(),
            preprocess: None,
            ensemble: None,
            simulate: SimulateConfig::default(),
            sweep: SweepConfig::default(),
            predict: PredictConfig::default(),
            evaluate: EvaluateConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the run seed and the fusion variant implied by the model kind.
    pub fn resolve(mut self) -> Self {
        self.mtlr.seed = self.seed;
        self.neural_mtlr.train.seed = self.seed;
        self.fusion.train.seed = self.seed;
        if let Some(v) = self.model.variant() {
            self.fusion.variant = v;
        }
        self
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(RESOLVED_CONFIG_FILE),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }

    pub fn fusion_for(&self, kind: ModelKind) -> FusionConfig {
        let mut f = self.fusion.clone();
        if let Some(v) = kind.variant() {
            f.variant = v;
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model":"cox","learning_rate":1}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data":{"ehr":"a.csv","extra":1}}"#).is_err()
        );
        assert!(serde_json::from_str::<RunConfig>(r#"{"model":"random-forest"}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model":"deep-fusion-v1","seed":7,"mtlr":{"epochs":3}}"#)
                .unwrap();
        let cfg = cfg.resolve();
        assert_eq!(cfg.fusion.variant, Variant::V1);
        assert_eq!(cfg.mtlr.seed, 7);
        assert_eq!(cfg.mtlr.epochs, 3);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn kinds_parse_by_name() {
        for k in [
            ModelKind::Cox,
            ModelKind::Mtlr,
            ModelKind::NeuralMtlr,
            ModelKind::DeepFusionV1,
            ModelKind::DeepFusionV2,
            ModelKind::Ensemble,
        ] {
            assert_eq!(ModelKind::parse(k.name()), Some(k));
        }
        assert_eq!(ModelKind::parse("svm"), None);
    }
}

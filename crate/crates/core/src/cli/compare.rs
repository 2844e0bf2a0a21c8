//! Side-by-side comparison of model configurations on one train/test split.

use std::path::Path;

use serde::Serialize;

use super::config::{DataConfig, ModelKind, RunConfig};
use super::pipeline::{image_config, kind_needs_images, load_dataset, train_model};
use crate::ensemble::{EnsembleSpec, Normalization};
use crate::error::Result;
use crate::survival::concordance;

#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub name: String,
    pub kind: ModelKind,
    pub ensemble: Option<EnsembleSpec>,
}

impl Configuration {
    pub fn single(name: &str, kind: ModelKind) -> Self {
        Self {
            name: name.into(),
            kind,
            ensemble: None,
        }
    }

    pub fn ensemble(name: &str, members: &[ModelKind]) -> Self {
        let names: Vec<&str> = members.iter().map(|k| k.name()).collect();
        Self {
            name: name.into(),
            kind: ModelKind::Ensemble,
            ensemble: Some(EnsembleSpec::equal(&names, Normalization::ZScore)),
        }
    }

    /// Member kinds joined by `+`, or the single kind.
    pub fn members(&self) -> String {
        match &self.ensemble {
            Some(spec) => spec
                .members
                .iter()
                .map(|m| m.model.as_str())
                .collect::<Vec<_>>()
                .join("+"),
            None => self.kind.name().into(),
        }
    }
}

/// Linear MTLR on the EHR alone; one image path feeding the MTLR head; and
/// the three-path and one-path fusion networks each averaged with Cox.
pub fn standard_configurations() -> Vec<Configuration> {
    vec![
        Configuration::single("mtlr", ModelKind::Mtlr),
        Configuration::single("mtlr+cnn", ModelKind::DeepFusionV2),
        Configuration::ensemble(
            "mtlr+cox+fusion-v1",
            &[ModelKind::DeepFusionV1, ModelKind::Cox],
        ),
        Configuration::ensemble(
            "mtlr+cox+fusion-v2",
            &[ModelKind::DeepFusionV2, ModelKind::Cox],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub configuration: String,
    pub members: String,
    pub n_train: usize,
    pub n_test: usize,
    pub c_index: f64,
    pub comparable_pairs: u64,
}

/// Trains every configuration on `train` (encoding fitted there) and scores
/// it on `test`. Model files go under `out/<name>`.
pub fn compare(
    base: &RunConfig,
    train: &DataConfig,
    test: &DataConfig,
    configs: &[Configuration],
    out: &Path,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let mut cfg = base.clone();
        cfg.model = c.kind;
        cfg.ensemble = c.ensemble.clone();
        let cfg = cfg.resolve();
        let fusion = if kind_needs_images(c.kind, &cfg)? {
            Some(image_config(c.kind, &cfg)?)
        } else {
            None
        };
        let images = fusion.as_ref().map(|f| (f, cfg.preprocess.as_ref()));
        let (train_ds, spec) = load_dataset(train, None, images)?;
        let outcome = train_model(c.kind, &cfg, &train_ds, &out.join(&c.name))?;
        let (test_ds, _) = load_dataset(test, Some(&spec), images)?;
        let risks = outcome.model.predict_risks(&test_ds)?;
        let conc = concordance(&risks, &test_ds.records)?;
        log::info!("{}: test C-index {:.4}", c.name, conc.c_index);
        rows.push(ComparisonRow {
            configuration: c.name.clone(),
            members: c.members(),
            n_train: train_ds.records.len(),
            n_test: test_ds.records.len(),
            c_index: conc.c_index,
            comparable_pairs: conc.comparable_pairs,
        });
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

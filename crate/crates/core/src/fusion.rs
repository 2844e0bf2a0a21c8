//! Image-plus-EHR survival network. Each image path is two convolution
//! blocks (`conv k3 → ReLU → BN → conv k5 → ReLU → BN → maxpool`), global
//! average pooling and a linear projection to the path feature length.
//! Path features are concatenated with the EHR covariates and pass through
//! `FC → ReLU → dropout → FC → ReLU` into an MTLR head.
//!
//! V2 has one path over the fused scan; V1 has independent paths over CT,
//! PET and the fused scan.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtlr::{
    diverged, head_loss, interval_probabilities, risk_from_logits, survival_from_probabilities,
    MtlrConfig, MtlrParams, Stepper, Target,
};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{Layer, LayerSpec, Mode, Parameters, Sequential, Tensor};
use crate::rng::derive_seed;
use crate::survival::{
    concordance_index, event_count, RiskScore, SurvivalCurve, SurvivalRecord, TimeGrid,
};
use crate::volume::{PreparedImages, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Separate CT, PET and fused paths.
    V1,
    /// Fused path only.
    V2,
}

impl Variant {
    pub fn paths(self) -> usize {
        match self {
            Variant::V1 => 3,
            Variant::V2 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 50×80×80 input, channels 32/64/128/256, 256-wide features and FC layers.
    Paper,
    /// 16³ input, channels 4/4/8/8, 16-wide features and FC layers.
    Desk,
}

/// Unset fields take the defaults of the named profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartialFusionConfig")]
pub struct FusionConfig {
    pub variant: Variant,
    pub profile: Profile,
    pub input: Shape3,
    pub channels: [usize; 4],
    pub feature_len: usize,
    pub fc: [usize; 2],
    pub dropout: f64,
    pub train: MtlrConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialFusionConfig {
    variant: Option<Variant>,
    profile: Option<Profile>,
    input: Option<Shape3>,
    channels: Option<[usize; 4]>,
    feature_len: Option<usize>,
    fc: Option<[usize; 2]>,
    dropout: Option<f64>,
    train: Option<MtlrConfig>,
}

impl TryFrom<PartialFusionConfig> for FusionConfig {
    type Error = String;

    fn try_from(p: PartialFusionConfig) -> std::result::Result<Self, String> {
        let base = Self::new(
            p.variant.unwrap_or(Variant::V2),
            p.profile.unwrap_or(Profile::Desk),
        );
        Ok(Self {
            input: p.input.unwrap_or(base.input),
            channels: p.channels.unwrap_or(base.channels),
            feature_len: p.feature_len.unwrap_or(base.feature_len),
            fc: p.fc.unwrap_or(base.fc),
            dropout: p.dropout.unwrap_or(base.dropout),
            train: p.train.unwrap_or(base.train),
            ..base
        })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::new(Variant::V2, Profile::Desk)
    }
}

impl FusionConfig {
    pub fn new(variant: Variant, profile: Profile) -> Self {
        let train = MtlrConfig::default();
        match profile {
            Profile::Paper => Self {
                variant,
                profile,
                input: Shape3::new(50, 80, 80),
                channels: [32, 64, 128, 256],
                feature_len: 256,
                fc: [256, 256],
                dropout: 0.2,
                train,
            },
            Profile::Desk => Self {
                variant,
                profile,
                input: Shape3::cube(16),
                channels: [4, 4, 8, 8],
                feature_len: 16,
                fc: [16, 16],
                dropout: 0.2,
                train,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.feature_len == 0 || self.fc.contains(&0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.input.axes().iter().any(|&n| n < 4) {
            return Err(Error::Config(format!(
                "fusion input {} too small for two pooling stages",
                self.input
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.train.validate()
    }

    /// Layers of one image path, input `(N, 1, D, H, W)`, output `(N, feature_len)`.
    pub fn path_specs(&self) -> Vec<LayerSpec> {
        let [c1, c2, c3, c4] = self.channels;
        let mut specs = Vec::new();
        for (cin, a, b) in [(1, c1, c2), (c2, c3, c4)] {
            specs.extend([
                LayerSpec::conv3d(cin, a, 3),
                LayerSpec::Relu,
                LayerSpec::batchnorm3d(a),
                LayerSpec::conv3d(a, b, 5),
                LayerSpec::Relu,
                LayerSpec::batchnorm3d(b),
                LayerSpec::Maxpool3d,
            ]);
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::linear(c4, self.feature_len));
        specs
    }

    pub fn image_feature_len(&self) -> usize {
        self.variant.paths() * self.feature_len
    }

    pub fn head_specs(&self, ehr_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::linear(self.image_feature_len() + ehr_dim, self.fc[0]),
            LayerSpec::Relu,
            LayerSpec::Dropout { p: self.dropout },
            LayerSpec::linear(self.fc[0], self.fc[1]),
            LayerSpec::Relu,
        ]
    }
}

/// One patient: outcome with EHR covariates, and one volume per path.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub record: SurvivalRecord,
    pub images: Vec<Volume>,
}

impl FusionSample {
    /// Selects the variant's path inputs: `[fused]` or `[ct, pet, fused]`.
    pub fn from_prepared(record: SurvivalRecord, images: PreparedImages, variant: Variant) -> Self {
        let images = match variant {
            Variant::V1 => vec![images.ct, images.pet, images.fused],
            Variant::V2 => vec![images.fused],
        };
        Self { record, images }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub ehr_dim: usize,
    pub paths: Vec<Sequential>,
    pub head: Sequential,
    pub mtlr: MtlrParams,
}

/// Builds a freshly initialized model; each part draws from its own seed stream.
pub fn build_model(config: &FusionConfig, ehr_dim: usize, grid: TimeGrid) -> Result<FusionModel> {
    config.validate()?;
    let seed = config.train.seed;
    let paths = (0..config.variant.paths())
        .map(|p| Sequential::new(&config.path_specs(), derive_seed(seed, &[0xF0, p as u64])))
        .collect::<Result<Vec<_>>>()?;
    let head = Sequential::new(&config.head_specs(ehr_dim), derive_seed(seed, &[0xF1]))?;
    Ok(FusionModel {
        config: config.clone(),
        ehr_dim,
        paths,
        head,
        mtlr: MtlrParams::zeros(grid, config.fc[1], config.train.c_reg),
    })
}

struct Forward {
    rows: Tensor,
    path_caches: Vec<Vec<crate::nn::Cache>>,
    head_caches: Vec<crate::nn::Cache>,
}

impl FusionModel {
    /// Layer kinds in order: every path, then the head.
    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.paths
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|s| s.layers.iter().map(|l| l.spec.name()))
            .collect()
    }

    fn image_batch(&self, samples: &[&FusionSample], path: usize) -> Result<Tensor> {
        let s = self.config.input;
        let mut data = Vec::with_capacity(samples.len() * s.len());
        for sample in samples {
            let v = sample.images.get(path).ok_or_else(|| {
                Error::Input(format!(
                    "patient {} has {} images, model needs {}",
                    sample.record.patient_id,
                    sample.images.len(),
                    self.paths.len()
                ))
            })?;
            if v.shape != s {
                return Err(Error::shape(
                    format!("image of patient {}", sample.record.patient_id),
                    &s.axes(),
                    &v.shape.axes(),
                ));
            }
            data.extend_from_slice(&v.data);
        }
        Tensor::new(vec![samples.len(), 1, s.d, s.h, s.w], data)
    }

    fn ehr_batch(&self, samples: &[&FusionSample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * self.ehr_dim);
        for sample in samples {
            if sample.record.dim() != self.ehr_dim {
                return Err(Error::shape(
                    format!("EHR of patient {}", sample.record.patient_id),
                    &[self.ehr_dim],
                    &[sample.record.dim()],
                ));
            }
            data.extend_from_slice(&sample.record.covariates);
        }
        Tensor::new(vec![samples.len(), self.ehr_dim], data)
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.config.feature_len; self.paths.len()];
        w.push(self.ehr_dim);
        w
    }

    /// Concatenated image features, shape `(N, paths · feature_len)`.
    pub fn image_features(&self, samples: &[&FusionSample]) -> Result<Tensor> {
        let feats = (0..self.paths.len())
            .map(|p| self.paths[p].infer(&self.image_batch(samples, p)?))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_features(&feats.iter().collect::<Vec<_>>())
    }

    fn forward(&mut self, samples: &[&FusionSample], mode: Mode, seed: u64) -> Result<Forward> {
        let mut parts = Vec::with_capacity(self.paths.len() + 1);
        let mut path_caches = Vec::with_capacity(self.paths.len());
        for p in 0..self.paths.len() {
            let images = self.image_batch(samples, p)?;
            let (f, c) =
                self.paths[p].forward(&images, mode, derive_seed(seed, &[0xA0, p as u64]))?;
            parts.push(f);
            path_caches.push(c);
        }
        parts.push(self.ehr_batch(samples)?);
        let joined = Tensor::concat_features(&parts.iter().collect::<Vec<_>>())?;
        let (rows, head_caches) = self
            .head
            .forward(&joined, mode, derive_seed(seed, &[0xA1]))?;
        Ok(Forward {
            rows,
            path_caches,
            head_caches,
        })
    }

    /// Objective on `samples` (NLL scaled by `weight`, plus the MTLR penalty)
    /// and gradients in [`Parameters`] order. Train mode updates batch-norm
    /// running statistics.
    pub fn loss_and_grads(
        &mut self,
        samples: &[&FusionSample],
        mode: Mode,
        seed: u64,
        weight: f64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let fwd = self.forward(samples, mode, seed)?;
        let d = fwd.rows.shape()[1];
        let rows: Vec<&[f64]> = fwd.rows.data().chunks(d).collect();
        let targets: Vec<Target> = samples
            .iter()
            .map(|s| Target::for_record(&self.mtlr.grid, &s.record))
            .collect();
        let (nll, gt, gb, gx) = head_loss(&self.mtlr, &rows, &targets, weight, true)?;
        let (g_joined, head_grads) = self.head.backward(
            &fwd.head_caches,
            &Tensor::new(fwd.rows.shape().to_vec(), gx)?,
        )?;
        let pieces = g_joined.split_features(&self.widths())?;
        let mut grads = Vec::new();
        for (p, caches) in fwd.path_caches.iter().enumerate() {
            let (_, g) = self.paths[p].backward(caches, &pieces[p])?;
            grads.extend(g.into_iter().flatten());
        }
        grads.extend(head_grads.into_iter().flatten());
        grads.push(gt);
        grads.push(gb);
        Ok((nll + self.mtlr.penalty(), grads))
    }

    /// Objective of [`FusionModel::loss_and_grads`] without the backward pass.
    pub fn loss(
        &mut self,
        samples: &[&FusionSample],
        mode: Mode,
        seed: u64,
        weight: f64,
    ) -> Result<f64> {
        let fwd = self.forward(samples, mode, seed)?;
        let d = fwd.rows.shape()[1];
        let rows: Vec<&[f64]> = fwd.rows.data().chunks(d).collect();
        let targets: Vec<Target> = samples
            .iter()
            .map(|s| Target::for_record(&self.mtlr.grid, &s.record))
            .collect();
        let (nll, ..) = head_loss(&self.mtlr, &rows, &targets, weight, false)?;
        Ok(nll + self.mtlr.penalty())
    }

    /// Eval-mode MTLR logits, computed in chunks of the training batch size.
    fn eval_rows(&self, samples: &[FusionSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.train.batch_size.max(1)) {
            let refs: Vec<&FusionSample> = chunk.iter().collect();
            let mut parts = Vec::with_capacity(self.paths.len() + 1);
            for p in 0..self.paths.len() {
                parts.push(self.paths[p].infer(&self.image_batch(&refs, p)?)?);
            }
            parts.push(self.ehr_batch(&refs)?);
            let h = self
                .head
                .infer(&Tensor::concat_features(&parts.iter().collect::<Vec<_>>())?)?;
            let d = h.shape()[1];
            for row in h.data().chunks(d) {
                out.push(self.mtlr.logits(row)?);
            }
        }
        Ok(out)
    }

    pub fn predict_risks(&self, samples: &[FusionSample]) -> Result<Vec<RiskScore>> {
        let z = self.eval_rows(samples)?;
        Ok(samples
            .iter()
            .zip(z)
            .map(|(s, z)| RiskScore::new(s.record.patient_id.clone(), risk_from_logits(&z)))
            .collect())
    }

    pub fn predict_survival_curves(&self, samples: &[FusionSample]) -> Result<Vec<SurvivalCurve>> {
        let z = self.eval_rows(samples)?;
        z.iter()
            .map(|z| {
                let s = survival_from_probabilities(&interval_probabilities(z));
                Ok(SurvivalCurve::from_steps(self.mtlr.grid.points(), &s))
            })
            .collect()
    }

    pub fn save(&self, stem: impl AsRef<Path>, step: u64) -> Result<()> {
        let stem = stem.as_ref();
        let names: Vec<String> = (0..self.paths.len()).map(|p| format!("path{p}")).collect();
        let mtlr_layer = Sequential::from_layers(vec![Layer {
            spec: LayerSpec::linear(self.mtlr.dim(), self.mtlr.m()),
            params: vec![self.mtlr.theta.clone(), self.mtlr.bias.clone()],
            buffers: Vec::new(),
        }])?;
        let mut groups: Vec<(&str, &Sequential)> =
            names.iter().map(String::as_str).zip(&self.paths).collect();
        groups.push(("head", &self.head));
        groups.push(("mtlr", &mtlr_layer));
        save_checkpoint(stem, &groups, self.config.train.seed, step)?;
        let meta = ModelFile {
            config: self.config.clone(),
            ehr_dim: self.ehr_dim,
            grid: self.mtlr.grid.clone(),
        };
        std::fs::write(config_path(stem), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let meta: ModelFile = serde_json::from_str(&std::fs::read_to_string(config_path(stem))?)?;
        let (_, mut groups) = load_checkpoint(stem)?;
        let n_paths = meta.config.variant.paths();
        if groups.len() != n_paths + 2 {
            return Err(Error::Input(format!(
                "checkpoint has {} groups, expected {}",
                groups.len(),
                n_paths + 2
            )));
        }
        let mtlr_seq = groups.pop().expect("mtlr group").1;
        let head = groups.pop().expect("head group").1;
        let paths: Vec<Sequential> = groups.into_iter().map(|(_, s)| s).collect();
        let [theta, bias]: [Tensor; 2] = mtlr_seq.layers[0]
            .params
            .clone()
            .try_into()
            .map_err(|_| Error::Input("malformed MTLR group".into()))?;
        let mtlr = MtlrParams::new(meta.grid, theta, bias, meta.config.train.c_reg)?;
        let model = FusionModel {
            config: meta.config,
            ehr_dim: meta.ehr_dim,
            paths,
            head,
            mtlr,
        };
        let expected = build_model(&model.config, model.ehr_dim, model.mtlr.grid.clone())?;
        if expected.layer_kinds() != model.layer_kinds() {
            return Err(Error::Input(
                "checkpoint layers do not match the stored config".into(),
            ));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    config: FusionConfig,
    ehr_dim: usize,
    grid: TimeGrid,
}

/// `<stem>.config.json`, next to the checkpoint's `<stem>.json` and `<stem>.bin`.
pub fn config_path(stem: &Path) -> PathBuf {
    stem.with_extension("config.json")
}

impl Parameters for FusionModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t: Vec<&Tensor> = self.paths.iter().flat_map(|p| p.tensors()).collect();
        t.extend(self.head.tensors());
        t.push(&self.mtlr.theta);
        t.push(&self.mtlr.bias);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t: Vec<&mut Tensor> = self
            .paths
            .iter_mut()
            .flat_map(|p| p.tensors_mut())
            .collect();
        t.extend(self.head.tensors_mut());
        t.push(&mut self.mtlr.theta);
        t.push(&mut self.mtlr.bias);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed train-mode batch NLL over the epoch plus the end-of-epoch penalty.
    pub loss: f64,
    pub val_c_index: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<&'a [FusionSample]>,
    /// Where to write the last finite model if training diverges.
    pub checkpoint_on_failure: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct FusionFit {
    pub model: FusionModel,
    pub log: Vec<EpochLog>,
}

/// Adam (or plain descent) on the censored MTLR objective, end to end.
pub fn train(
    mut model: FusionModel,
    samples: &[FusionSample],
    opts: &TrainOptions,
) -> Result<FusionFit> {
    let cfg = model.config.train.clone();
    cfg.validate()?;
    if samples.is_empty()
        || event_count(&samples.iter().map(|s| s.record.clone()).collect::<Vec<_>>()) == 0
    {
        return Err(Error::NoEvents);
    }
    let n = samples.len();
    let mut stepper = Stepper::new(&cfg, &model.tensors());
    let mut log: Vec<EpochLog> = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        let mut epoch_nll = 0.0;
        let outcome: Result<()> = (|| {
            for (b, batch) in cfg.batches(n, epoch).into_iter().enumerate() {
                let refs: Vec<&FusionSample> = batch.iter().map(|&i| &samples[i]).collect();
                let seed = derive_seed(cfg.seed, &[0xE7, epoch as u64, b as u64]);
                let weight = n as f64 / batch.len() as f64;
                let (value, grads) = model.loss_and_grads(&refs, Mode::Train, seed, weight)?;
                epoch_nll += (value - model.mtlr.penalty()) / weight;
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                stepper.step(&mut model.tensors_mut(), &grad_refs)?;
            }
            Ok(())
        })();
        let loss = epoch_nll + model.mtlr.penalty();
        if outcome.is_err() || !loss.is_finite() || !model.tensors().iter().all(|t| t.all_finite())
        {
            if let Some(path) = &opts.checkpoint_on_failure {
                last_good.save(path, epoch as u64)?;
            }
            let trace: Vec<f64> = log.iter().map(|l| l.loss).collect();
            return Err(diverged(epoch, &trace));
        }
        let val_c_index = match opts.validation {
            Some(v) => {
                let risks = model.predict_risks(v)?;
                let records: Vec<SurvivalRecord> = v.iter().map(|s| s.record.clone()).collect();
                concordance_index(&risks, &records).ok()
            }
            None => None,
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            loss,
            val_c_index,
        });
        last_good = model.clone();
    }
    Ok(FusionFit { model, log })
}

/// `epoch,loss,val_c_index` rows; the last column is empty without validation.
pub fn write_training_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,loss,val_c_index")?;
    for l in log {
        let c = l.val_c_index.map(|c| c.to_string()).unwrap_or_default();
        writeln!(f, "{},{},{}", l.epoch, l.loss, c)?;
    }
    f.flush()?;
    Ok(())
}

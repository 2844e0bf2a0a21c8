//! Multi-task logistic regression over a discretized time axis.
//!
//! With grid `t_1 < ... < t_m` and per-point logits `z_j = θ_j · x + b_j`,
//! the score of label sequence `k` (event in interval `(t_k, t_{k+1}]`) is
//! `f(x, k) = Σ_{j > k} z_j`, and the `m + 1` sequences share one softmax.
//! A censored patient contributes the probability mass of every sequence
//! whose interval ends after the censoring time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Layer, LayerSpec, Mode, Parameters, Sequential, Tensor};
use crate::rng::{derive_seed, rng_for};
use crate::survival::{
    cohort_dim, event_count, RiskScore, SurvivalCurve, SurvivalRecord, TimeGrid,
};

/// MTLR parameter bank: one weight row and bias per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlrParams {
    pub grid: TimeGrid,
    /// `m × d`, row `j` is `θ_j`.
    pub theta: Tensor,
    pub bias: Tensor,
    pub c_reg: f64,
}

impl MtlrParams {
    pub fn zeros(grid: TimeGrid, dim: usize, c_reg: f64) -> Self {
        let m = grid.len();
        Self {
            grid,
            theta: Tensor::zeros(&[m, dim]),
            bias: Tensor::zeros(&[m]),
            c_reg,
        }
    }

    pub fn new(grid: TimeGrid, theta: Tensor, bias: Tensor, c_reg: f64) -> Result<Self> {
        let m = grid.len();
        if theta.rank() != 2 || theta.shape()[0] != m {
            return Err(Error::shape(
                "mtlr theta",
                &[m, theta.shape().get(1).copied().unwrap_or(0)],
                theta.shape(),
            ));
        }
        if bias.shape() != [m] {
            return Err(Error::shape("mtlr bias", &[m], bias.shape()));
        }
        if !(c_reg >= 0.0) {
            return Err(Error::Config(format!("c_reg must be >= 0, got {c_reg}")));
        }
        let p = Self {
            grid,
            theta,
            bias,
            c_reg,
        };
        p.check_finite()?;
        Ok(p)
    }

    pub fn m(&self) -> usize {
        self.grid.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.shape()[1]
    }

    fn check_finite(&self) -> Result<()> {
        if self.theta.all_finite() && self.bias.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("MTLR parameters".into()))
        }
    }

    /// `z_j = θ_j · x + b_j` for every grid point.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::shape("mtlr covariates", &[d], &[x.len()]));
        }
        Ok(self
            .theta
            .data()
            .chunks(d)
            .zip(self.bias.data())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    /// `(C/2) Σ_j |θ_j|²`.
    pub fn penalty(&self) -> f64 {
        0.5 * self.c_reg * self.theta.sum_squares()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(p.grid, p.theta, p.bias, p.c_reg)
    }
}

/// Monotone label sequence `y` with `y_j = 1` iff `j > k` (1-based `j`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSequence {
    pub k: usize,
    pub m: usize,
}

impl LabelSequence {
    pub fn new(k: usize, m: usize) -> Result<Self> {
        if k > m {
            return Err(Error::Input(format!("sequence index {k} exceeds m = {m}")));
        }
        Ok(Self { k, m })
    }

    /// The sequence of an event observed at time `s`: `y_j = 1` iff `s <= t_j`.
    pub fn for_event(grid: &TimeGrid, s: f64) -> Self {
        Self {
            k: grid.event_interval(s),
            m: grid.len(),
        }
    }

    pub fn values(&self) -> Vec<u8> {
        (1..=self.m).map(|j| u8::from(j > self.k)).collect()
    }
}

/// Which label sequences are consistent with a patient's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Exactly one sequence.
    Event(usize),
    /// Every sequence `k >= first`.
    Censored { first: usize },
}

impl Target {
    pub fn for_record(grid: &TimeGrid, r: &SurvivalRecord) -> Self {
        if r.event {
            Target::Event(grid.event_interval(r.time))
        } else {
            Target::Censored {
                first: grid.first_interval_after(r.time),
            }
        }
    }

    fn range(&self, m: usize) -> std::ops::RangeInclusive<usize> {
        match *self {
            Target::Event(k) => k..=k,
            Target::Censored { first } => first..=m,
        }
    }
}

/// `f(x, k) = Σ_{j = k+1..m} (θ_j · x + b_j)`.
pub fn sequence_score(params: &MtlrParams, x: &[f64], k: usize) -> Result<f64> {
    let m = params.m();
    if k > m {
        return Err(Error::Input(format!(
            "sequence index {k} out of range 0..={m}"
        )));
    }
    Ok(params.logits(x)?[k..].iter().sum())
}

/// Scores of all `m + 1` sequences from the logits.
fn sequence_scores(z: &[f64]) -> Vec<f64> {
    let m = z.len();
    let mut f = vec![0.0; m + 1];
    for k in (0..m).rev() {
        f[k] = f[k + 1] + z[k];
    }
    f
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over the `m + 1` sequences.
pub fn interval_probabilities(z: &[f64]) -> Vec<f64> {
    let f = sequence_scores(z);
    let lse = log_sum_exp(&f);
    f.iter().map(|v| (v - lse).exp()).collect()
}

/// Negative log-likelihood of one patient and its gradient with respect to
/// the logits `z`.
pub fn nll_from_logits(z: &[f64], target: Target) -> (f64, Vec<f64>) {
    let m = z.len();
    let f = sequence_scores(z);
    let lse_all = log_sum_exp(&f);
    let range = target.range(m);
    let lse_ok = log_sum_exp(&f[range.clone()]);
    // d/dz_j log Σ_{k∈A} e^{f_k} = P_A(k < j), j = 1..m  (z index j-1).
    let mut grad = vec![0.0; m];
    let (mut cum_all, mut cum_ok) = (0.0, 0.0);
    for j in 0..m {
        cum_all += (f[j] - lse_all).exp();
        if range.contains(&j) {
            cum_ok += (f[j] - lse_ok).exp();
        }
        grad[j] = cum_all - cum_ok;
    }
    (lse_all - lse_ok, grad)
}

/// Loss value with gradients over θ and b.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub value: f64,
    pub grad_theta: Tensor,
    pub grad_bias: Tensor,
}

/// `(C/2) Σ_j |θ_j|² + Σ_i NLL_i` with censored patients marginalized over
/// their consistent sequences.
pub fn mtlr_loss(params: &MtlrParams, records: &[SurvivalRecord]) -> Result<LossAndGrad> {
    if records.is_empty() {
        return Err(Error::Input("MTLR loss over an empty cohort".into()));
    }
    params.check_finite()?;
    let d = params.dim();
    let rows: Vec<&[f64]> = records.iter().map(|r| r.covariates.as_slice()).collect();
    let targets: Vec<Target> = records
        .iter()
        .map(|r| Target::for_record(&params.grid, r))
        .collect();
    let (nll, grad_theta, grad_bias, _) = head_loss(params, &rows, &targets, 1.0, false)?;
    debug_assert_eq!(grad_theta.shape(), &[params.m(), d]);
    Ok(LossAndGrad {
        value: nll + params.penalty(),
        grad_theta,
        grad_bias,
    })
}

/// Summed NLL over `rows` scaled by `weight`, plus the penalty gradient on θ.
/// Optionally returns the gradient with respect to each input row.
pub(crate) fn head_loss(
    params: &MtlrParams,
    rows: &[&[f64]],
    targets: &[Target],
    weight: f64,
    want_input_grad: bool,
) -> Result<(f64, Tensor, Tensor, Vec<f64>)> {
    let (m, d) = (params.m(), params.dim());
    let mut value = 0.0;
    let mut gt = params.theta.clone();
    gt.scale(params.c_reg);
    let mut gb = Tensor::zeros(&[m]);
    let mut gx = if want_input_grad {
        vec![0.0; rows.len() * d]
    } else {
        Vec::new()
    };
    for (i, (x, &target)) in rows.iter().zip(targets).enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MTLR input".into()));
        }
        let z = params.logits(x)?;
        let (nll, gz) = nll_from_logits(&z, target);
        value += weight * nll;
        for (j, &gzj) in gz.iter().enumerate() {
            let g = weight * gzj;
            gb.data_mut()[j] += g;
            let row = &mut gt.data_mut()[j * d..(j + 1) * d];
            for (w, v) in row.iter_mut().zip(x.iter()) {
                *w += g * v;
            }
            if want_input_grad {
                let th = &params.theta.data()[j * d..(j + 1) * d];
                for (o, t) in gx[i * d..(i + 1) * d].iter_mut().zip(th) {
                    *o += g * t;
                }
            }
        }
    }
    Ok((value, gt, gb, gx))
}

/// Survival curve `(0, 1), (t_1, S(t_1)), ..., (t_m, S(t_m))`.
pub fn predict_survival_curve(params: &MtlrParams, x: &[f64]) -> Result<SurvivalCurve> {
    params.check_finite()?;
    let probs = interval_probabilities(&params.logits(x)?);
    Ok(SurvivalCurve::from_steps(
        params.grid.points(),
        &survival_from_probabilities(&probs),
    ))
}

/// `S(t_j) = Σ_{k >= j} P(k)` for `j = 1..m`.
pub(crate) fn survival_from_probabilities(probs: &[f64]) -> Vec<f64> {
    let m = probs.len() - 1;
    let mut s = vec![0.0; m];
    let mut tail = probs[m];
    for j in (1..=m).rev() {
        s[j - 1] = tail.min(1.0);
        tail += probs[j - 1];
    }
    s
}

/// Cumulative incidence mass over the grid: `Σ_j (1 − S(t_j))`.
pub fn risk_from_logits(z: &[f64]) -> f64 {
    let s = survival_from_probabilities(&interval_probabilities(z));
    s.iter().map(|v| 1.0 - v).sum()
}

pub fn predict_risk(params: &MtlrParams, x: &[f64]) -> Result<f64> {
    params.check_finite()?;
    Ok(risk_from_logits(&params.logits(x)?))
}

pub fn predict_risks(params: &MtlrParams, records: &[SurvivalRecord]) -> Result<Vec<RiskScore>> {
    records
        .iter()
        .map(|r| {
            Ok(RiskScore::new(
                r.patient_id.clone(),
                predict_risk(params, &r.covariates)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtlrConfig {
    pub c_reg: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// One deterministic full-cohort step per epoch, no shuffling.
    pub full_batch: bool,
}

impl Default for MtlrConfig {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            lr: 0.016,
            epochs: 100,
            batch_size: 16,
            optimizer: Optimizer::Adam,
            seed: 0,
            full_batch: false,
        }
    }
}

impl MtlrConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.c_reg >= 0.0) || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "need c_reg >= 0, lr > 0, batch_size > 0".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.full_batch {
            return vec![order];
        }
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(self.seed, &[0xB7, epoch as u64]));
        order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Fitted parameters with the per-epoch training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MtlrFit {
    pub params: MtlrParams,
    pub loss_trace: Vec<f64>,
}

pub(crate) enum Stepper {
    Adam(AdamState),
    Sgd(f64),
}

impl Stepper {
    pub(crate) fn new(config: &MtlrConfig, params: &[&Tensor]) -> Self {
        match config.optimizer {
            Optimizer::Adam => Stepper::Adam(AdamState::for_params(config.lr, params)),
            Optimizer::Sgd => Stepper::Sgd(config.lr),
        }
    }

    pub(crate) fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        match self {
            Stepper::Adam(state) => state.step(params, grads),
            Stepper::Sgd(lr) => {
                if grads.iter().any(|g| !g.all_finite()) {
                    return Err(Error::NonFinite("gradient".into()));
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
                Ok(())
            }
        }
    }
}

pub(crate) fn diverged(epoch: usize, trace: &[f64]) -> Error {
    Error::Divergence {
        epoch,
        trace: trace.to_vec(),
    }
}

/// Fits linear MTLR from zero parameters by mini-batch descent. Each batch
/// gradient is scaled by `n / |batch|` so it estimates the full objective.
pub fn fit_mtlr(
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    config: &MtlrConfig,
) -> Result<MtlrFit> {
    config.validate()?;
    let d = cohort_dim(records)?;
    if event_count(records) == 0 {
        return Err(Error::NoEvents);
    }
    let n = records.len();
    let mut params = MtlrParams::zeros(grid.clone(), d, config.c_reg);
    let targets: Vec<Target> = records
        .iter()
        .map(|r| Target::for_record(grid, r))
        .collect();
    let mut stepper = Stepper::new(config, &[&params.theta, &params.bias]);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        for batch in config.batches(n, epoch) {
            let rows: Vec<&[f64]> = batch
                .iter()
                .map(|&i| records[i].covariates.as_slice())
                .collect();
            let tg: Vec<Target> = batch.iter().map(|&i| targets[i]).collect();
            let weight = n as f64 / batch.len() as f64;
            let (_, gt, gb, _) = head_loss(&params, &rows, &tg, weight, false)?;
            stepper
                .step(&mut [&mut params.theta, &mut params.bias], &[&gt, &gb])
                .map_err(|_| diverged(epoch, &trace))?;
        }
        let loss = mtlr_loss(&params, records)
            .map_err(|_| diverged(epoch, &trace))?
            .value;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(diverged(epoch, &trace));
        }
    }
    Ok(MtlrFit {
        params,
        loss_trace: trace,
    })
}

/// Fully connected encoder feeding an MTLR head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralMtlrModel {
    pub encoder: Sequential,
    pub head: MtlrParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralMtlrConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub freeze_encoder: bool,
    pub train: MtlrConfig,
}

impl Default for NeuralMtlrConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            dropout: 0.2,
            freeze_encoder: false,
            train: MtlrConfig::default(),
        }
    }
}

/// `Linear → ReLU` per hidden width, with dropout between consecutive blocks.
pub fn encoder_specs(input: usize, hidden: &[usize], dropout: f64) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        if i > 0 && dropout > 0.0 {
            specs.push(LayerSpec::Dropout { p: dropout });
        }
        specs.push(LayerSpec::linear(width, h));
        specs.push(LayerSpec::Relu);
        width = h;
    }
    specs
}

impl NeuralMtlrModel {
    pub fn new(input_dim: usize, grid: TimeGrid, config: &NeuralMtlrConfig) -> Result<Self> {
        let encoder = Sequential::new(
            &encoder_specs(input_dim, &config.hidden, config.dropout),
            config.train.seed,
        )?;
        let out = config.hidden.last().copied().unwrap_or(input_dim);
        Ok(Self {
            encoder,
            head: MtlrParams::zeros(grid, out, config.train.c_reg),
        })
    }

    pub fn from_parts(encoder: Sequential, head: MtlrParams) -> Result<Self> {
        let model = Self { encoder, head };
        let d = model.encoder_output_dim(model.input_dim()?)?;
        if d != model.head.dim() {
            return Err(Error::shape(
                "encoder output vs head",
                &[model.head.dim()],
                &[d],
            ));
        }
        Ok(model)
    }

    fn input_dim(&self) -> Result<usize> {
        match self.encoder.layers.iter().find_map(|l| match l.spec {
            LayerSpec::Linear { input, .. } => Some(input),
            _ => None,
        }) {
            Some(d) => Ok(d),
            None => Ok(self.head.dim()),
        }
    }

    fn encoder_output_dim(&self, input: usize) -> Result<usize> {
        Ok(self.encoder.output_shape(&[1, input])?[1])
    }

    fn batch_tensor(records: &[&SurvivalRecord]) -> Result<Tensor> {
        let d = records.first().map(|r| r.dim()).unwrap_or(0);
        let data = records
            .iter()
            .flat_map(|r| r.covariates.iter().copied())
            .collect();
        Tensor::new(vec![records.len(), d], data)
    }

    /// Encoded features in eval mode.
    pub fn encode(&self, records: &[SurvivalRecord]) -> Result<Tensor> {
        let refs: Vec<&SurvivalRecord> = records.iter().collect();
        self.encoder.infer(&Self::batch_tensor(&refs)?)
    }

    /// Objective over `records` (forward in `mode`) with gradients for every
    /// tensor in [`Parameters`] order: encoder tensors, then θ and b.
    pub fn loss_and_grads(
        &self,
        records: &[&SurvivalRecord],
        mode: Mode,
        seed: u64,
        weight: f64,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut enc = self.encoder.clone();
        let (h, caches) = enc.forward(&Self::batch_tensor(records)?, mode, seed)?;
        let (value, gt, gb, gh) = self.head_pass(&h, records, weight)?;
        let gh = Tensor::new(h.shape().to_vec(), gh)?;
        let (_, layer_grads) = self.encoder.backward(&caches, &gh)?;
        let mut grads: Vec<Tensor> = layer_grads.into_iter().flatten().collect();
        grads.push(gt);
        grads.push(gb);
        Ok((value + self.head.penalty(), grads))
    }

    fn head_pass(
        &self,
        h: &Tensor,
        records: &[&SurvivalRecord],
        weight: f64,
    ) -> Result<(f64, Tensor, Tensor, Vec<f64>)> {
        let d = h.shape()[1];
        let rows: Vec<&[f64]> = h.data().chunks(d).collect();
        let targets: Vec<Target> = records
            .iter()
            .map(|r| Target::for_record(&self.head.grid, r))
            .collect();
        head_loss(&self.head, &rows, &targets, weight, true)
    }

    /// Full objective in eval mode.
    pub fn loss(&self, records: &[SurvivalRecord]) -> Result<f64> {
        let h = self.encode(records)?;
        let refs: Vec<&SurvivalRecord> = records.iter().collect();
        Ok(self.head_pass(&h, &refs, 1.0)?.0 + self.head.penalty())
    }

    pub fn predict_risks(&self, records: &[SurvivalRecord]) -> Result<Vec<RiskScore>> {
        let h = self.encode(records)?;
        let d = h.shape()[1];
        records
            .iter()
            .zip(h.data().chunks(d))
            .map(|(r, x)| {
                Ok(RiskScore::new(
                    r.patient_id.clone(),
                    predict_risk(&self.head, x)?,
                ))
            })
            .collect()
    }

    pub fn predict_survival_curve(&self, record: &SurvivalRecord) -> Result<SurvivalCurve> {
        let h = self.encode(std::slice::from_ref(record))?;
        predict_survival_curve(&self.head, h.data())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_parts(m.encoder, m.head)
    }
}

impl Parameters for NeuralMtlrModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.push(&self.head.theta);
        t.push(&self.head.bias);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.push(&mut self.head.theta);
        t.push(&mut self.head.bias);
        t
    }
}

/// Neural model with the per-epoch (eval-mode) training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMtlrFit {
    pub model: NeuralMtlrModel,
    pub loss_trace: Vec<f64>,
}

/// Trains encoder and head jointly (only the head when the encoder is frozen).
pub fn fit_neural_mtlr(
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    config: &NeuralMtlrConfig,
) -> Result<NeuralMtlrFit> {
    let d = cohort_dim(records)?;
    let model = NeuralMtlrModel::new(d, grid.clone(), config)?;
    train_neural(model, records, config)
}

/// Continues training an existing model.
pub fn train_neural(
    mut model: NeuralMtlrModel,
    records: &[SurvivalRecord],
    config: &NeuralMtlrConfig,
) -> Result<NeuralMtlrFit> {
    let train = &config.train;
    train.validate()?;
    if event_count(records) == 0 {
        return Err(Error::NoEvents);
    }
    let n = records.len();
    let n_enc = model.encoder.tensors().len();
    let mut stepper = Stepper::new(train, &model.tensors());
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        for (b, batch) in train.batches(n, epoch).into_iter().enumerate() {
            let refs: Vec<&SurvivalRecord> = batch.iter().map(|&i| &records[i]).collect();
            let seed = derive_seed(train.seed, &[0xE9, epoch as u64, b as u64]);
            let weight = n as f64 / batch.len() as f64;
            let (_, mut grads) = model
                .loss_and_grads(&refs, Mode::Train, seed, weight)
                .map_err(|_| diverged(epoch, &trace))?;
            if config.freeze_encoder {
                grads.iter_mut().take(n_enc).for_each(|g| g.scale(0.0));
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            stepper
                .step(&mut model.tensors_mut(), &grad_refs)
                .map_err(|_| diverged(epoch, &trace))?;
        }
        let loss = model.loss(records).map_err(|_| diverged(epoch, &trace))?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(diverged(epoch, &trace));
        }
    }
    Ok(NeuralMtlrFit {
        model,
        loss_trace: trace,
    })
}

/// Encoder consisting of one identity linear layer.
pub fn identity_encoder(dim: usize) -> Sequential {
    Sequential::from_layers(vec![Layer::identity_linear(dim)]).expect("single layer chain")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[f64]) -> TimeGrid {
        TimeGrid::new(points.to_vec()).unwrap()
    }

    fn rec(id: usize, x: Vec<f64>, t: f64, e: bool) -> SurvivalRecord {
        SurvivalRecord::new(format!("p{id}"), x, t, e).unwrap()
    }

    #[test]
    fn sequence_score_examples() {
        let mut p = MtlrParams::zeros(grid(&[1.0, 2.0]), 1, 0.0);
        assert_eq!(sequence_score(&p, &[1.0], 2).unwrap(), 0.0);
        assert_eq!(sequence_score(&p, &[1.0], 0).unwrap(), 0.0);
        p.theta = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        p.bias = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(sequence_score(&p, &[1.0], 0).unwrap(), 3.0);
        assert_eq!(sequence_score(&p, &[1.0], 1).unwrap(), 1.5);
        assert!(sequence_score(&p, &[1.0], 3).is_err());
    }

    #[test]
    fn label_sequences_are_monotone() {
        let g = grid(&[10.0, 20.0, 30.0]);
        assert_eq!(LabelSequence::for_event(&g, 5.0).values(), vec![1, 1, 1]);
        assert_eq!(LabelSequence::for_event(&g, 20.0).values(), vec![0, 1, 1]);
        assert_eq!(LabelSequence::for_event(&g, 25.0).values(), vec![0, 0, 1]);
        assert_eq!(LabelSequence::for_event(&g, 99.0).values(), vec![0, 0, 0]);
        assert!(LabelSequence::new(4, 3).is_err());
    }

    #[test]
    fn zero_params_uncensored_loss_is_n_log_m_plus_one() {
        let g = grid(&[1.0, 2.0, 3.0, 4.0]);
        let p = MtlrParams::zeros(g, 2, 0.0);
        let recs: Vec<_> = (0..7)
            .map(|i| rec(i, vec![i as f64, 1.0], 0.5 + i as f64, true))
            .collect();
        let l = mtlr_loss(&p, &recs).unwrap();
        assert!((l.value - 7.0 * 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_params_censored_loss_is_log_ratio() {
        let g = grid(&[1.0, 2.0, 3.0, 4.0]);
        let p = MtlrParams::zeros(g, 1, 0.0);
        // Censored at 2.5: intervals k = 2, 3, 4 end after it (q = 3).
        let l = mtlr_loss(&p, &[rec(0, vec![0.3], 2.5, false)]).unwrap();
        assert!((l.value - (5.0f64 / 3.0).ln()).abs() < 1e-12);
        // Censored exactly on a grid point excludes the interval ending there.
        let l = mtlr_loss(&p, &[rec(0, vec![0.3], 2.0, false)]).unwrap();
        assert!((l.value - (5.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_params_survival_is_uniform_staircase() {
        let p = MtlrParams::zeros(grid(&[1.0, 2.0, 3.0]), 2, 0.0);
        let c = predict_survival_curve(&p, &[0.4, -1.0]).unwrap();
        assert_eq!(c.times, vec![0.0, 1.0, 2.0, 3.0]);
        for (a, b) in c.probabilities.iter().zip([1.0, 0.75, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((predict_risk(&p, &[0.4, -1.0]).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn single_point_reduces_to_logistic() {
        let mut p = MtlrParams::zeros(grid(&[5.0]), 1, 0.0);
        let c = predict_survival_curve(&p, &[1.0]).unwrap();
        assert!((c.probabilities[1] - 0.5).abs() < 1e-15);
        for z in [-2.0, 0.3, 1.7] {
            p.bias = Tensor::new(vec![1], vec![z]).unwrap();
            let s = predict_survival_curve(&p, &[0.0]).unwrap().probabilities[1];
            assert!((s - 1.0 / (1.0 + z.exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_decomposition_is_exact() {
        let g = grid(&[1.0, 2.0]);
        let mut p = MtlrParams::zeros(g, 2, 0.0);
        p.theta = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let recs = vec![
            rec(0, vec![1.0, 0.5], 1.5, true),
            rec(1, vec![-1.0, 0.2], 0.5, false),
        ];
        let base = mtlr_loss(&p, &recs).unwrap().value;
        p.c_reg = 3.0;
        let reg = mtlr_loss(&p, &recs).unwrap().value;
        assert_eq!(reg, base + 1.5 * p.theta.sum_squares());
    }

    #[test]
    fn invalid_inputs() {
        let p = MtlrParams::zeros(grid(&[1.0]), 1, 0.0);
        assert!(mtlr_loss(&p, &[]).is_err());
        let mut bad = p.clone();
        bad.bias = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(mtlr_loss(&bad, &[rec(0, vec![0.0], 1.0, true)]).is_err());
        assert!(MtlrParams::new(
            grid(&[1.0]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[1]),
            0.0
        )
        .is_err());
        assert!(MtlrParams::new(
            grid(&[1.0]),
            Tensor::zeros(&[1, 1]),
            Tensor::zeros(&[1]),
            -1.0
        )
        .is_err());
    }

    #[test]
    fn identity_encoder_reproduces_vanilla_loss() {
        let g = grid(&[1.0, 2.0, 3.0]);
        let mut head = MtlrParams::zeros(g, 2, 0.7);
        head.theta = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.9]).unwrap();
        head.bias = Tensor::new(vec![3], vec![0.1, -0.3, 0.2]).unwrap();
        let recs = vec![
            rec(0, vec![1.0, 0.5], 1.5, true),
            rec(1, vec![-1.0, 0.2], 0.5, false),
            rec(2, vec![0.3, -2.0], 4.0, true),
        ];
        let model = NeuralMtlrModel::from_parts(identity_encoder(2), head.clone()).unwrap();
        assert_eq!(
            model.loss(&recs).unwrap(),
            mtlr_loss(&head, &recs).unwrap().value
        );

        let cfg = NeuralMtlrConfig {
            freeze_encoder: true,
            train: MtlrConfig {
                epochs: 3,
                full_batch: true,
                ..MtlrConfig::default()
            },
            ..NeuralMtlrConfig::default()
        };
        let fit = train_neural(model.clone(), &recs, &cfg).unwrap();
        assert_eq!(fit.model.encoder, model.encoder);
    }

    #[test]
    fn json_round_trip() {
        let p = MtlrParams::new(
            grid(&[1.0, 2.0]),
            Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap(),
            Tensor::new(vec![2], vec![0.3, 0.4]).unwrap(),
            2.0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        p.save_json(&path).unwrap();
        assert_eq!(MtlrParams::load_json(&path).unwrap(), p);
    }
}

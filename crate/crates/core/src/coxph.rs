//! Cox proportional hazards: Breslow partial likelihood with analytic
//! derivatives, Newton–Raphson fitting, Breslow baseline hazard, and
//! partial-effect survival curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::survival::{cohort_dim, event_count, RiskScore, SurvivalCurve, SurvivalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoxConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// L2 penalty `ridge/2 · |beta|²` on the objective.
    pub ridge: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            ridge: 0.0,
        }
    }
}

/// Negative log partial likelihood with its gradient and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Row-major `d × d`.
    pub hessian: Vec<Vec<f64>>,
}

/// Breslow-tied negative log partial likelihood at `beta`.
pub fn neg_log_partial_likelihood(
    beta: &[f64],
    records: &[SurvivalRecord],
) -> Result<PartialLikelihood> {
    let d = cohort_dim(records)?;
    if beta.len() != d {
        return Err(Error::shape("partial likelihood beta", &[d], &[beta.len()]));
    }
    if event_count(records) == 0 {
        return Err(Error::NoEvents);
    }
    let eta: Vec<f64> = records.iter().map(|r| dot(beta, &r.covariates)).collect();
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("linear predictor".into()));
    }
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[b].time.total_cmp(&records[a].time));

    let mut w_sum = 0.0;
    let mut wx_sum = vec![0.0; d];
    let mut wxx_sum = vec![vec![0.0; d]; d];
    let mut value = 0.0;
    let mut gradient = vec![0.0; d];
    let mut hessian = vec![vec![0.0; d]; d];

    let mut start = 0;
    while start < order.len() {
        let t = records[order[start]].time;
        let mut end = start;
        while end < order.len() && records[order[end]].time == t {
            let i = order[end];
            let x = &records[i].covariates;
            let w = (eta[i] - shift).exp();
            w_sum += w;
            for a in 0..d {
                wx_sum[a] += w * x[a];
                for b in 0..=a {
                    wxx_sum[a][b] += w * x[a] * x[b];
                }
            }
            end += 1;
        }
        let deaths: Vec<usize> = order[start..end]
            .iter()
            .copied()
            .filter(|&i| records[i].event)
            .collect();
        if !deaths.is_empty() {
            let k = deaths.len() as f64;
            value += k * (w_sum.ln() + shift);
            for &i in &deaths {
                value -= eta[i];
                for (g, x) in gradient.iter_mut().zip(&records[i].covariates) {
                    *g -= x;
                }
            }
            for a in 0..d {
                let mean_a = wx_sum[a] / w_sum;
                gradient[a] += k * mean_a;
                for b in 0..=a {
                    let mean_b = wx_sum[b] / w_sum;
                    hessian[a][b] += k * (wxx_sum[a][b] / w_sum - mean_a * mean_b);
                }
            }
        }
        start = end;
    }
    for a in 1..d {
        let (upper, lower) = hessian.split_at_mut(a);
        for (b, row) in upper.iter_mut().enumerate() {
            row[a] = lower[0][b];
        }
    }
    Ok(PartialLikelihood {
        value,
        gradient,
        hessian,
    })
}

/// True when the partial likelihood increases without bound along `beta`:
/// every event carries the largest linear predictor of its risk set, with at
/// least one strict inequality.
fn is_monotone_direction(beta: &[f64], records: &[SurvivalRecord]) -> bool {
    if beta.iter().all(|b| *b == 0.0) {
        return false;
    }
    let eta: Vec<f64> = records.iter().map(|r| dot(beta, &r.covariates)).collect();
    let slack = 1e-9 * eta.iter().fold(1.0f64, |m, e| m.max(e.abs()));
    let mut strict = false;
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.event) {
        let risk_max = records
            .iter()
            .zip(&eta)
            .filter(|(o, _)| o.time >= r.time)
            .map(|(_, e)| *e)
            .fold(f64::NEG_INFINITY, f64::max);
        if eta[i] < risk_max - slack {
            return false;
        }
        strict |= records
            .iter()
            .zip(&eta)
            .any(|(o, e)| o.time >= r.time && *e < eta[i] - slack);
    }
    strict
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A` by Cholesky.
/// Returns `None` when `A` is not numerically positive definite.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(1.0);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 1e-13 * scale {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Outcome of the Newton iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Penalized objective after each accepted step (index 0 = start).
    pub trace: Vec<f64>,
}

/// Breslow cumulative hazard at the reference covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

impl BaselineHazard {
    pub fn at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&x| x <= t);
        if idx == 0 {
            0.0
        } else {
            self.cumhaz[idx - 1]
        }
    }

    /// `S0(t) = exp(-H0(t))` as a step curve.
    pub fn survival(&self) -> SurvivalCurve {
        let probs: Vec<f64> = self.cumhaz.iter().map(|h| (-h).exp()).collect();
        SurvivalCurve::from_steps(&self.times, &probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Covariate profile the baseline refers to (training cohort mean).
    pub reference: Vec<f64>,
    pub baseline: BaselineHazard,
    pub report: ConvergenceReport,
}

pub(crate) fn column_means(records: &[SurvivalRecord], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in records {
        for (m, x) in mean.iter_mut().zip(&r.covariates) {
            *m += x;
        }
    }
    let n = records.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn penalized(pl: &mut PartialLikelihood, beta: &[f64], ridge: f64) {
    if ridge > 0.0 {
        pl.value += 0.5 * ridge * dot(beta, beta);
        for (a, b) in beta.iter().enumerate() {
            pl.gradient[a] += ridge * b;
            pl.hessian[a][a] += ridge;
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits Cox regression by Newton–Raphson with step-halving.
pub fn fit_cox(records: &[SurvivalRecord], config: &CoxConfig) -> Result<CoxModel> {
    let d = cohort_dim(records)?;
    let names = (0..d).map(|j| format!("x{j}")).collect();
    fit_cox_named(records, names, config)
}

pub fn fit_cox_named(
    records: &[SurvivalRecord],
    feature_names: Vec<String>,
    config: &CoxConfig,
) -> Result<CoxModel> {
    let d = cohort_dim(records)?;
    if feature_names.len() != d {
        return Err(Error::shape("feature names", &[d], &[feature_names.len()]));
    }
    if config.ridge < 0.0 || config.tol <= 0.0 {
        return Err(Error::Config("ridge must be >= 0 and tol > 0".into()));
    }
    if event_count(records) < 2 {
        return Err(Error::Input("Cox fitting needs at least two events".into()));
    }
    let mean = column_means(records, d);
    let mut sd = vec![0.0; d];
    for r in records {
        for j in 0..d {
            sd[j] += (r.covariates[j] - mean[j]).powi(2);
        }
    }
    for (j, s) in sd.iter_mut().enumerate() {
        *s = (*s / records.len() as f64).sqrt();
        if *s == 0.0 {
            return Err(Error::ConstantFeature(feature_names[j].clone()));
        }
    }
    let separated = |beta: &[f64]| config.ridge == 0.0 && is_monotone_direction(beta, records);

    let mut beta = vec![0.0; d];
    let mut pl = neg_log_partial_likelihood(&beta, records)?;
    penalized(&mut pl, &beta, config.ridge);
    let mut trace = vec![pl.value];
    let mut iterations = 0;
    while inf_norm(&pl.gradient) >= config.tol {
        if iterations == config.max_iter {
            if separated(&beta) {
                return Err(Error::Separation {
                    beta_norm: inf_norm(&beta),
                    trace,
                });
            }
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: inf_norm(&pl.gradient),
                trace,
            });
        }
        let Some(step) = cholesky_solve(&pl.hessian, &pl.gradient) else {
            if separated(&beta) {
                return Err(Error::Separation {
                    beta_norm: inf_norm(&beta),
                    trace,
                });
            }
            return Err(Error::SingularHessian);
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - scale * s).collect();
            if let Ok(mut next) = neg_log_partial_likelihood(&cand, records) {
                penalized(&mut next, &cand, config.ridge);
                if next.value.is_finite() && next.value <= pl.value + 1e-12 * pl.value.abs() {
                    accepted = Some((cand, next));
                    break;
                }
            }
            scale *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((b, next)) => {
                beta = b;
                pl = next;
                trace.push(pl.value);
            }
            // No descent possible: the objective is flat to rounding.
            None => break,
        }
    }
    if separated(&beta) {
        return Err(Error::Separation {
            beta_norm: inf_norm(&beta),
            trace,
        });
    }
    let grad_norm = inf_norm(&pl.gradient);
    let report = ConvergenceReport {
        converged: grad_norm < config.tol,
        iterations,
        grad_norm,
        trace,
    };
    let baseline = breslow_baseline(records, &beta, &mean);
    Ok(CoxModel {
        feature_names,
        beta,
        reference: mean,
        baseline,
        report,
    })
}

/// `H0(t) = Σ_{t_k ≤ t} d_k / Σ_{j ∈ R(t_k)} exp(beta·(x_j − ref))`.
fn breslow_baseline(records: &[SurvivalRecord], beta: &[f64], reference: &[f64]) -> BaselineHazard {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time));
    let rel: Vec<f64> = records
        .iter()
        .map(|r| {
            let centered: Vec<f64> = r
                .covariates
                .iter()
                .zip(reference)
                .map(|(x, m)| x - m)
                .collect();
            dot(beta, &centered).exp()
        })
        .collect();
    // Risk-set sums from the back.
    let mut tail = vec![0.0; order.len() + 1];
    for k in (0..order.len()).rev() {
        tail[k] = tail[k + 1] + rel[order[k]];
    }
    let mut times = Vec::new();
    let mut cumhaz = Vec::new();
    let mut h = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = records[order[k]].time;
        let mut end = k;
        let mut deaths = 0usize;
        while end < order.len() && records[order[end]].time == t {
            deaths += usize::from(records[order[end]].event);
            end += 1;
        }
        if deaths > 0 {
            h += deaths as f64 / tail[k];
            times.push(t);
            cumhaz.push(h);
        }
        k = end;
    }
    BaselineHazard { times, cumhaz }
}

impl CoxModel {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Linear predictor `beta · x`.
    pub fn linear_predictor(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("Cox covariates", &[self.dim()], &[x.len()]));
        }
        Ok(dot(&self.beta, x))
    }

    pub fn predict_risk(&self, records: &[SurvivalRecord]) -> Result<Vec<RiskScore>> {
        records
            .iter()
            .map(|r| {
                Ok(RiskScore::new(
                    r.patient_id.clone(),
                    self.linear_predictor(&r.covariates)?,
                ))
            })
            .collect()
    }

    /// Predicted survival for covariates `x`.
    pub fn survival_curve(&self, x: &[f64]) -> Result<SurvivalCurve> {
        let rel = self.linear_predictor(x)? - dot(&self.beta, &self.reference);
        Ok(self.curve_with_log_ratio(rel))
    }

    fn curve_with_log_ratio(&self, log_ratio: f64) -> SurvivalCurve {
        let factor = log_ratio.exp();
        let probs: Vec<f64> = self
            .baseline
            .cumhaz
            .iter()
            .map(|h| (-h * factor).exp())
            .collect();
        SurvivalCurve::from_steps(&self.baseline.times, &probs)
    }

    /// Survival curves as one covariate takes each of `values`, the others
    /// held at the cohort mean of `records`.
    pub fn partial_effect_curves(
        &self,
        records: &[SurvivalRecord],
        covariate: &str,
        values: &[f64],
    ) -> Result<Vec<SurvivalCurve>> {
        let j = self
            .feature_names
            .iter()
            .position(|n| n == covariate)
            .ok_or_else(|| Error::UnknownCovariate(covariate.to_string()))?;
        let d = cohort_dim(records)?;
        if d != self.dim() {
            return Err(Error::shape("partial-effect cohort", &[self.dim()], &[d]));
        }
        let cohort_mean = column_means(records, d);
        // Baseline at the cohort mean: S0 = S_ref^{exp(beta·(mean − ref))}.
        let base: f64 = self
            .beta
            .iter()
            .zip(cohort_mean.iter().zip(&self.reference))
            .map(|(b, (m, r))| b * (m - r))
            .sum();
        Ok(values
            .iter()
            .map(|&v| self.curve_with_log_ratio(base + self.beta[j] * (v - cohort_mean[j])))
            .collect())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&CoxFile::from(self))?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file: CoxFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(file.into())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedCoefficient {
    name: String,
    beta: f64,
    reference: f64,
}

/// On-disk layout: coefficients keyed by feature name, baseline as
/// `(time, cumulative hazard)` pairs.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoxFile {
    coefficients: Vec<NamedCoefficient>,
    baseline_cumhaz: Vec<(f64, f64)>,
    convergence: ConvergenceReport,
}

impl From<&CoxModel> for CoxFile {
    fn from(m: &CoxModel) -> Self {
        CoxFile {
            coefficients: m
                .feature_names
                .iter()
                .zip(m.beta.iter().zip(&m.reference))
                .map(|(n, (b, r))| NamedCoefficient {
                    name: n.clone(),
                    beta: *b,
                    reference: *r,
                })
                .collect(),
            baseline_cumhaz: m
                .baseline
                .times
                .iter()
                .copied()
                .zip(m.baseline.cumhaz.iter().copied())
                .collect(),
            convergence: m.report.clone(),
        }
    }
}

impl From<CoxFile> for CoxModel {
    fn from(f: CoxFile) -> Self {
        CoxModel {
            feature_names: f.coefficients.iter().map(|c| c.name.clone()).collect(),
            beta: f.coefficients.iter().map(|c| c.beta).collect(),
            reference: f.coefficients.iter().map(|c| c.reference).collect(),
            baseline: BaselineHazard {
                times: f.baseline_cumhaz.iter().map(|p| p.0).collect(),
                cumhaz: f.baseline_cumhaz.iter().map(|p| p.1).collect(),
            },
            report: f.convergence,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: usize, x: Vec<f64>, time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord::new(format!("p{id}"), x, time, event).unwrap()
    }

    fn random_cohort(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<SurvivalRecord> {
        (0..n)
            .map(|i| {
                let x = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
                // Integer times create Breslow ties.
                let t = f64::from(rng.gen_range(1..6u32));
                rec(i, x, t, i == 0 || rng.gen_bool(0.7))
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_beta_value_is_sum_of_log_risk_set_sizes() {
        let times = [1.0, 2.0, 2.0, 3.0, 4.0];
        let events = [true, true, false, true, false];
        let recs: Vec<_> = (0..5)
            .map(|i| rec(i, vec![i as f64], times[i], events[i]))
            .collect();
        let pl = neg_log_partial_likelihood(&[0.0], &recs).unwrap();
        // Risk sets at event times 1, 2, 3: sizes 5, 4, 2.
        let expected = 5f64.ln() + 4f64.ln() + 2f64.ln();
        assert!((pl.value - expected).abs() < 1e-12);
    }

    #[test]
    fn two_patient_hand_expansion() {
        let recs = vec![rec(0, vec![1.0], 1.0, true), rec(1, vec![0.0], 2.0, true)];
        for b in [0.0, 0.7, -1.3] {
            let pl = neg_log_partial_likelihood(&[b], &recs).unwrap();
            let expected = (1.0 + (-b).exp()).ln();
            assert!((pl.value - expected).abs() < 1e-12);
        }
        let pl = neg_log_partial_likelihood(&[0.0], &recs).unwrap();
        assert!((pl.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..20 {
            let recs = random_cohort(&mut rng, 6, 2);
            let beta: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pl = neg_log_partial_likelihood(&beta, &recs).unwrap();
            for a in 0..2 {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[a] += h;
                dn[a] -= h;
                let fu = neg_log_partial_likelihood(&up, &recs).unwrap();
                let fd = neg_log_partial_likelihood(&dn, &recs).unwrap();
                let g = (fu.value - fd.value) / (2.0 * h);
                assert!(
                    rel_err(pl.gradient[a], g) < 1e-6,
                    "grad {a}: {} vs {g}",
                    pl.gradient[a]
                );
                for b in 0..2 {
                    let hd = (fu.gradient[b] - fd.gradient[b]) / (2.0 * h);
                    assert!(rel_err(pl.hessian[a][b], hd) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn no_events_is_an_error() {
        let recs = vec![rec(0, vec![1.0], 1.0, false)];
        assert!(matches!(
            neg_log_partial_likelihood(&[0.0], &recs),
            Err(Error::NoEvents)
        ));
    }

    #[test]
    fn risk_is_linear_predictor() {
        let mut m = fit_cox(
            &[
                rec(0, vec![1.0, 0.0], 1.0, true),
                rec(1, vec![0.0, 1.0], 2.0, true),
                rec(2, vec![0.5, 0.3], 3.0, false),
                rec(3, vec![0.1, 0.9], 2.5, true),
            ],
            &CoxConfig {
                ridge: 0.1,
                ..CoxConfig::default()
            },
        )
        .unwrap();
        m.beta = vec![1.0, -1.0];
        assert_eq!(m.linear_predictor(&[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(m.linear_predictor(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(m.linear_predictor(&[1.0]).is_err());
    }

    fn separated_cohort() -> Vec<SurvivalRecord> {
        (0..10)
            .map(|i| {
                let group = if i < 5 { 1.0 } else { 0.0 };
                rec(i, vec![group], (i + 1) as f64, true)
            })
            .collect()
    }

    #[test]
    fn separation_is_detected_without_ridge() {
        let err = fit_cox(&separated_cohort(), &CoxConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Separation { .. }), "got {err:?}");
    }

    #[test]
    fn ridge_gives_finite_positive_beta_under_separation() {
        let cfg = CoxConfig {
            ridge: 0.5,
            ..CoxConfig::default()
        };
        let m = fit_cox(&separated_cohort(), &cfg).unwrap();
        assert!(m.beta[0].is_finite() && m.beta[0] > 0.0);
        assert!(m.report.converged);
    }

    #[test]
    fn constant_feature_is_rejected() {
        let recs: Vec<_> = (0..4)
            .map(|i| rec(i, vec![1.0], (i + 1) as f64, true))
            .collect();
        assert!(matches!(
            fit_cox(&recs, &CoxConfig::default()),
            Err(Error::ConstantFeature(_))
        ));
    }

    #[test]
    fn max_iter_exhaustion_reports_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs = random_cohort(&mut rng, 30, 2);
        let cfg = CoxConfig {
            max_iter: 1,
            tol: 1e-14,
            ridge: 0.0,
        };
        match fit_cox(&recs, &cfg) {
            Err(Error::NonConvergence {
                iterations, trace, ..
            }) => {
                assert_eq!(iterations, 1);
                assert_eq!(trace.len(), 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn baseline_is_monotone_and_partial_effect_at_mean_is_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recs = random_cohort(&mut rng, 40, 2);
        let m = fit_cox(&recs, &CoxConfig::default()).unwrap();
        assert!(m.baseline.cumhaz.windows(2).all(|w| w[1] >= w[0]));
        assert!(m.baseline.cumhaz[0] > 0.0);
        let mean = column_means(&recs, 2);
        let curves = m.partial_effect_curves(&recs, "x1", &[mean[1]]).unwrap();
        assert_eq!(curves[0], m.baseline.survival());
        assert!(matches!(
            m.partial_effect_curves(&recs, "nope", &[0.0]),
            Err(Error::UnknownCovariate(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs = random_cohort(&mut rng, 20, 2);
        let m = fit_cox(&recs, &CoxConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cox.json");
        m.save_json(&p).unwrap();
        assert_eq!(CoxModel::load_json(&p).unwrap(), m);
    }
}

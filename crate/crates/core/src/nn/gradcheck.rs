//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use serde::Serialize;

use super::layer::Mode;
use super::sequential::Sequential;
use super::tensor::Tensor;
use super::Parameters;
use crate::error::Result;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Check at most this many entries per tensor (sampled with `seed`).
    pub max_per_tensor: Option<usize>,
    pub check_input: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            mode: Mode::Train,
            seed: 0,
            max_per_tensor: None,
            check_input: true,
        }
    }
}

/// Location of a checked entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Location {
    Input { index: usize },
    Param { tensor: usize, index: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Location>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn indices(len: usize, limit: Option<usize>, seed: u64, tag: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut idx = sample(&mut rng_for(seed, &[0x6C, tag]), len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` parameter gradients of any [`Parameters`] model with
/// central differences of `loss`. Parameter tensors are restored afterwards.
pub fn check_parameters<M, F>(
    model: &mut M,
    analytic: &[Tensor],
    mut loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Parameters,
    F: FnMut(&mut M) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in lens.iter().enumerate() {
        for idx in indices(len, opts.max_per_tensor, opts.seed, ti as u64) {
            let orig = model.tensors_mut()[ti].data()[idx];
            model.tensors_mut()[ti].data_mut()[idx] = orig + opts.h;
            let up = loss(model)?;
            model.tensors_mut()[ti].data_mut()[idx] = orig - opts.h;
            let down = loss(model)?;
            model.tensors_mut()[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.h);
            let err = relative_error(analytic[ti].data()[idx], numeric, opts.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Location::Param {
                    tensor: ti,
                    index: idx,
                });
            }
        }
    }
    Ok(report)
}

/// Analytic gradients of `loss_fn(model(input))` for a layer sequence:
/// returns `(loss, input gradient, flat parameter gradients)`.
pub fn analytic_gradients<F>(
    model: &Sequential,
    input: &Tensor,
    loss_fn: &F,
    opts: &GradCheckOptions,
) -> Result<(f64, Tensor, Vec<Tensor>)>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let mut probe = model.clone();
    let (out, caches) = probe.forward(input, opts.mode, opts.seed)?;
    let (value, grad_out) = loss_fn(&out);
    let (grad_in, per_layer) = model.backward(&caches, &grad_out)?;
    Ok((value, grad_in, per_layer.into_iter().flatten().collect()))
}

/// Gradient check of a layer sequence against supplied analytic gradients.
pub fn grad_check_against<F>(
    model: &Sequential,
    input: &Tensor,
    loss_fn: &F,
    grad_in: &Tensor,
    param_grads: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let mut probe = model.clone();
    let mut report = check_parameters(
        &mut probe,
        param_grads,
        |m: &mut Sequential| Ok(loss_fn(&m.forward(input, opts.mode, opts.seed)?.0).0),
        opts,
    )?;
    if opts.check_input {
        let mut x = input.clone();
        for idx in indices(x.len(), opts.max_per_tensor, opts.seed, u64::MAX) {
            let orig = x.data()[idx];
            x.data_mut()[idx] = orig + opts.h;
            let up = loss_fn(&probe.forward(&x, opts.mode, opts.seed)?.0).0;
            x.data_mut()[idx] = orig - opts.h;
            let down = loss_fn(&probe.forward(&x, opts.mode, opts.seed)?.0).0;
            x.data_mut()[idx] = orig;
            let err = relative_error(
                grad_in.data()[idx],
                (up - down) / (2.0 * opts.h),
                opts.floor,
            );
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Location::Input { index: idx });
            }
        }
    }
    Ok(report)
}

/// Checks backpropagation of a layer sequence under `loss_fn`, which maps the
/// model output to `(loss, d loss / d output)`.
pub fn grad_check<F>(
    model: &Sequential,
    input: &Tensor,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let (_, grad_in, grads) = analytic_gradients(model, input, &loss_fn, opts)?;
    grad_check_against(model, input, &loss_fn, &grad_in, &grads, opts)
}

/// Probe loss `Σ ½(w·y)² + w·y` with fixed per-entry weights `w`, so every
/// output entry contributes with a distinct weight.
pub fn projection_loss(weights: Tensor) -> impl Fn(&Tensor) -> (f64, Tensor) {
    move |y: &Tensor| {
        let mut grad = y.clone();
        let mut value = 0.0;
        for ((g, &v), &w) in grad.data_mut().iter_mut().zip(y.data()).zip(weights.data()) {
            let p = v * w;
            value += 0.5 * p * p + p;
            *g = p * w + w;
        }
        (value, grad)
    }
}

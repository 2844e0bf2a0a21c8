//! Layer kinds with explicit forward and backward passes.
//!
//! Volumes are `(N, C, D, H, W)`, feature batches `(N, F)`. Convolutions use
//! stride 1 and padding `k / 2`; pooling uses a 2-voxel window with stride 2.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    Batchnorm3d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    Maxpool3d,
    Linear {
        input: usize,
        output: usize,
    },
    Dropout {
        p: f64,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn conv3d(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec::Conv3d {
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn batchnorm3d(channels: usize) -> Self {
        LayerSpec::Batchnorm3d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn linear(input: usize, output: usize) -> Self {
        LayerSpec::Linear { input, output }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::Batchnorm3d { .. } => "batchnorm3d",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool3d => "maxpool3d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    /// Output shape for an input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let ctx = self.name();
        match *self {
            LayerSpec::Conv3d {
                in_ch,
                out_ch,
                kernel,
            } => {
                expect_volume(ctx, input, in_ch)?;
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv3d kernel must be odd, got {kernel}"
                    )));
                }
                Ok(vec![input[0], out_ch, input[2], input[3], input[4]])
            }
            LayerSpec::Batchnorm3d { channels, .. } => {
                if input.len() < 2 || input[1] != channels {
                    return Err(Error::shape(ctx, &[0, channels], input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Maxpool3d => {
                expect_volume(ctx, input, input.get(1).copied().unwrap_or(0))?;
                let out = [input[2] / 2, input[3] / 2, input[4] / 2];
                if out.contains(&0) {
                    return Err(Error::shape(
                        "maxpool3d spatial (>= 2)",
                        &[2, 2, 2],
                        &input[2..],
                    ));
                }
                Ok(vec![input[0], input[1], out[0], out[1], out[2]])
            }
            LayerSpec::Linear { input: fin, output } => {
                if input.len() != 2 || input[1] != fin {
                    return Err(Error::shape(
                        ctx,
                        &[input.first().copied().unwrap_or(0), fin],
                        input,
                    ));
                }
                Ok(vec![input[0], output])
            }
            LayerSpec::GlobalAvgPool => {
                expect_volume(ctx, input, input.get(1).copied().unwrap_or(0))?;
                Ok(vec![input[0], input[1]])
            }
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv3d {
                in_ch,
                out_ch,
                kernel,
            } => vec![vec![out_ch, in_ch, kernel, kernel, kernel], vec![out_ch]],
            LayerSpec::Batchnorm3d { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Linear { input, output } => vec![vec![output, input], vec![output]],
            _ => Vec::new(),
        }
    }
}

fn expect_volume(ctx: &str, shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 5 || shape[1] != channels {
        let mut expected = vec![0, channels, 0, 0, 0];
        if shape.len() == 5 {
            expected = vec![shape[0], channels, shape[2], shape[3], shape[4]];
        }
        return Err(Error::shape(ctx, &expected, shape));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Values saved by `forward` for the matching `backward`.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv3d {
        input: Tensor,
    },
    Batchnorm3d {
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu {
        input: Tensor,
    },
    Maxpool3d {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Linear {
        input: Tensor,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
}

impl Cache {
    fn kind(&self) -> &'static str {
        match self {
            Cache::Conv3d { .. } => "conv3d",
            Cache::Batchnorm3d { .. } => "batchnorm3d",
            Cache::Relu { .. } => "relu",
            Cache::Maxpool3d { .. } => "maxpool3d",
            Cache::Linear { .. } => "linear",
            Cache::Dropout { .. } => "dropout",
            Cache::GlobalAvgPool { .. } => "global_avg_pool",
        }
    }
}

/// A layer with its trainable parameters and non-trainable buffers
/// (batch-norm running mean and variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
}

impl Layer {
    /// Kaiming-style fan-in uniform weights, zero biases, batch-norm affine (1, 0).
    pub fn init<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        let shapes = spec.param_shapes();
        let (params, buffers) = match spec {
            LayerSpec::Conv3d { .. } | LayerSpec::Linear { .. } => {
                let w_shape = &shapes[0];
                let fan_in: usize = w_shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let n: usize = w_shape.iter().product();
                let w = Tensor::new(w_shape.clone(), (0..n).map(|_| dist.sample(rng)).collect())
                    .expect("weight shape");
                (vec![w, Tensor::zeros(&shapes[1])], Vec::new())
            }
            LayerSpec::Batchnorm3d { channels, .. } => (
                vec![Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])],
                vec![Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0)],
            ),
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            spec,
            params,
            buffers,
        }
    }

    /// Linear layer initialized to the identity map.
    pub fn identity_linear(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            spec: LayerSpec::linear(dim, dim),
            params: vec![w, Tensor::zeros(&[dim])],
            buffers: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Forward pass. Batch-norm updates its running statistics in train mode;
    /// dropout draws its mask from `seed`.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, seed: u64) -> Result<(Tensor, Cache)> {
        let out_shape = self.spec.output_shape(input.shape())?;
        if !input.all_finite() {
            return Err(Error::NonFinite(format!("{} input", self.spec.name())));
        }
        let spec = self.spec;
        let result = match spec {
            LayerSpec::Conv3d { kernel, .. } => {
                let out =
                    conv3d_forward(input, &self.params[0], &self.params[1], kernel, &out_shape);
                (
                    out,
                    Cache::Conv3d {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::Batchnorm3d { eps, momentum, .. } => {
                self.batchnorm_forward(input, mode, eps, momentum)
            }
            LayerSpec::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                (
                    Tensor::new(out_shape, data)?,
                    Cache::Relu {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::Maxpool3d => {
                let (out, argmax) = maxpool_forward(input, &out_shape);
                (
                    out,
                    Cache::Maxpool3d {
                        argmax,
                        input_shape: input.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Linear { input: fin, output } => {
                let out = linear_forward(input, &self.params[0], &self.params[1], fin, output);
                (
                    out,
                    Cache::Linear {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::Dropout { p } => {
                if mode == Mode::Eval || p == 0.0 {
                    (input.clone(), Cache::Dropout { mask: None })
                } else {
                    let mut rng = rng_for(seed, &[0xD0]);
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..input.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                    (
                        Tensor::new(out_shape, data)?,
                        Cache::Dropout { mask: Some(mask) },
                    )
                }
            }
            LayerSpec::GlobalAvgPool => {
                let (n, c) = (input.shape()[0], input.shape()[1]);
                let per: usize = input.shape()[2..].iter().product();
                let data = input
                    .data()
                    .chunks(per)
                    .map(|ch| ch.iter().sum::<f64>() / per as f64)
                    .collect();
                (
                    Tensor::new(vec![n, c], data)?,
                    Cache::GlobalAvgPool {
                        input_shape: input.shape().to_vec(),
                    },
                )
            }
        };
        Ok(result)
    }

    /// Eval-mode forward pass that keeps no cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.spec.output_shape(input.shape())?;
        match self.spec {
            LayerSpec::Conv3d { kernel, .. } => Ok(conv3d_forward(
                input,
                &self.params[0],
                &self.params[1],
                kernel,
                &out_shape,
            )),
            LayerSpec::Linear { input: fin, output } => Ok(linear_forward(
                input,
                &self.params[0],
                &self.params[1],
                fin,
                output,
            )),
            LayerSpec::Maxpool3d => Ok(maxpool_forward(input, &out_shape).0),
            LayerSpec::Dropout { .. } => Ok(input.clone()),
            // Batch-norm only mutates in train mode; the clone is small.
            _ => Ok(self.clone().forward(input, Mode::Eval, 0)?.0),
        }
    }

    fn batchnorm_forward(
        &mut self,
        input: &Tensor,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> (Tensor, Cache) {
        let shape = input.shape();
        let (n, c) = (shape[0], shape[1]);
        let per: usize = shape[2..].iter().product();
        let count = (n * per) as f64;
        let x = input.data();
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let blocks = (0..n).map(|b| (b * c + ch) * per);
            let (mean, istd) = if mode == Mode::Train {
                let mean = blocks
                    .clone()
                    .map(|o| x[o..o + per].iter().sum::<f64>())
                    .sum::<f64>()
                    / count;
                let var = blocks
                    .clone()
                    .map(|o| {
                        x[o..o + per]
                            .iter()
                            .map(|v| (v - mean).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / count;
                let unbiased = if count > 1.0 {
                    var * count / (count - 1.0)
                } else {
                    var
                };
                let rm = &mut self.buffers[0].data_mut()[ch];
                *rm = (1.0 - momentum) * *rm + momentum * mean;
                let rv = &mut self.buffers[1].data_mut()[ch];
                *rv = (1.0 - momentum) * *rv + momentum * unbiased;
                (mean, 1.0 / (var + eps).sqrt())
            } else {
                let rm = self.buffers[0].data()[ch];
                let rv = self.buffers[1].data()[ch];
                (rm, 1.0 / (rv + eps).sqrt())
            };
            inv_std[ch] = istd;
            for o in blocks {
                for i in o..o + per {
                    xhat[i] = (x[i] - mean) * istd;
                    out[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
        let shape = shape.to_vec();
        (
            Tensor::new(shape.clone(), out).expect("bn shape"),
            Cache::Batchnorm3d {
                xhat: Tensor::new(shape, xhat).expect("bn shape"),
                inv_std,
                train: mode == Mode::Train,
            },
        )
    }

    /// Backward pass: gradient with respect to the input, and one gradient
    /// tensor per parameter (same order as `params`).
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let stale = || {
            Error::Input(format!(
                "cache of kind `{}` does not match layer `{}`",
                cache.kind(),
                self.spec.name()
            ))
        };
        match (self.spec, cache) {
            (LayerSpec::Conv3d { kernel, .. }, Cache::Conv3d { input }) => {
                let out_shape = self.spec.output_shape(input.shape())?;
                check_grad_shape(grad_out, &out_shape)?;
                let (gi, gw, gb) = conv3d_backward(input, &self.params[0], grad_out, kernel);
                Ok((gi, vec![gw, gb]))
            }
            (
                LayerSpec::Batchnorm3d { .. },
                Cache::Batchnorm3d {
                    xhat,
                    inv_std,
                    train,
                },
            ) => {
                check_grad_shape(grad_out, xhat.shape())?;
                Ok(self.batchnorm_backward(xhat, inv_std, *train, grad_out))
            }
            (LayerSpec::Relu, Cache::Relu { input }) => {
                check_grad_shape(grad_out, input.shape())?;
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), data)?, Vec::new()))
            }
            (
                LayerSpec::Maxpool3d,
                Cache::Maxpool3d {
                    argmax,
                    input_shape,
                },
            ) => {
                if grad_out.len() != argmax.len() {
                    return Err(Error::shape(
                        "maxpool3d grad",
                        &[argmax.len()],
                        &[grad_out.len()],
                    ));
                }
                let mut gi = Tensor::zeros(input_shape);
                for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                    gi.data_mut()[src] += g;
                }
                Ok((gi, Vec::new()))
            }
            (LayerSpec::Linear { input: fin, output }, Cache::Linear { input }) => {
                check_grad_shape(grad_out, &[input.batch(), output])?;
                Ok(linear_backward(
                    input,
                    &self.params[0],
                    grad_out,
                    fin,
                    output,
                ))
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => match mask {
                None => Ok((grad_out.clone(), Vec::new())),
                Some(mask) => {
                    if mask.len() != grad_out.len() {
                        return Err(stale());
                    }
                    let data = grad_out
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| g * m)
                        .collect();
                    Ok((Tensor::new(grad_out.shape().to_vec(), data)?, Vec::new()))
                }
            },
            (LayerSpec::GlobalAvgPool, Cache::GlobalAvgPool { input_shape }) => {
                check_grad_shape(grad_out, &input_shape[..2])?;
                let per: usize = input_shape[2..].iter().product();
                let mut gi = Tensor::zeros(input_shape);
                for (chunk, &g) in gi.data_mut().chunks_mut(per).zip(grad_out.data()) {
                    chunk.fill(g / per as f64);
                }
                Ok((gi, Vec::new()))
            }
            _ => Err(stale()),
        }
    }

    fn batchnorm_backward(
        &self,
        xhat: &Tensor,
        inv_std: &[f64],
        train: bool,
        grad_out: &Tensor,
    ) -> (Tensor, Vec<Tensor>) {
        let shape = xhat.shape();
        let (n, c) = (shape[0], shape[1]);
        let per: usize = shape[2..].iter().product();
        let count = (n * per) as f64;
        let gamma = self.params[0].data();
        let (xh, dy) = (xhat.data(), grad_out.data());
        let mut dx = vec![0.0; xh.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let blocks: Vec<usize> = (0..n).map(|b| (b * c + ch) * per).collect();
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for &o in &blocks {
                for i in o..o + per {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * xh[i];
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * inv_std[ch];
            for &o in &blocks {
                for i in o..o + per {
                    dx[i] = if train {
                        k * (dy[i] - sum_dy / count - xh[i] * sum_dy_xhat / count)
                    } else {
                        k * dy[i]
                    };
                }
            }
        }
        (
            Tensor::new(shape.to_vec(), dx).expect("bn grad"),
            vec![
                Tensor::new(vec![c], dgamma).expect("bn grad"),
                Tensor::new(vec![c], dbeta).expect("bn grad"),
            ],
        )
    }
}

fn check_grad_shape(grad: &Tensor, expected: &[usize]) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::shape("backward grad_out", expected, grad.shape()));
    }
    Ok(())
}

/// Valid output range along one axis for kernel offset `k` with padding `p`:
/// output positions `o` with `0 <= o + k - p < len`.
#[inline]
fn valid_range(len: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (len + p).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

/// Geometry of a same-padded, stride-1 3D convolution over one sample.
struct ConvGeom {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], k: usize) -> Self {
        Self {
            cin: shape[1],
            d: shape[2],
            h: shape[3],
            w: shape[4],
            k,
        }
    }

    fn plane(&self) -> usize {
        self.d * self.h * self.w
    }

    /// Rows of the unfolded matrix: one per `(c, kd, kh, kw)`.
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Output lines `(z, y)` per chunk, bounding the unfolded buffer to about 2^20 values.
    fn lines_per_chunk(&self) -> usize {
        ((1 << 20) / (self.rows() * self.w).max(1)).max(1)
    }

    /// Calls `f(r, line, dst_lo, src_offset, len)` for every nonzero run of
    /// the unfolded matrix restricted to lines `l0..l1`; `dst_lo` is relative
    /// to the line start and `src_offset` indexes the sample's input.
    fn for_each_run(
        &self,
        l0: usize,
        l1: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize),
    ) {
        let (k, p) = (self.k, self.k / 2);
        for c in 0..self.cin {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let r = ((c * k + kd) * k + kh) * k + kw;
                        let (lo, hi) = valid_range(self.w, kw, p);
                        if lo >= hi {
                            continue;
                        }
                        for line in l0..l1 {
                            let (z, y) = (line / self.h, line % self.h);
                            let (zz, yy) = (z + kd, y + kh);
                            if zz < p || zz - p >= self.d || yy < p || yy - p >= self.h {
                                continue;
                            }
                            let src = (c * self.d + zz - p) * self.h * self.w
                                + (yy - p) * self.w
                                + lo
                                + kw
                                - p;
                            f(r, line - l0, lo, src, hi - lo);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds lines `l0..l1` of one sample into `col` (`rows × lines·w`).
    fn im2col(&self, x: &[f64], l0: usize, l1: usize, col: &mut Vec<f64>) {
        let cols = (l1 - l0) * self.w;
        col.clear();
        col.resize(self.rows() * cols, 0.0);
        let w = self.w;
        self.for_each_run(l0, l1, |r, line, lo, src, len| {
            let dst = r * cols + line * w + lo;
            col[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
    }

    /// Scatter-adds an unfolded gradient back onto the sample's input gradient.
    fn col2im(&self, gcol: &[f64], l0: usize, l1: usize, gx: &mut [f64]) {
        let cols = (l1 - l0) * self.w;
        let w = self.w;
        self.for_each_run(l0, l1, |r, line, lo, src, len| {
            let from = r * cols + line * w + lo;
            for (dst, g) in gx[src..src + len].iter_mut().zip(&gcol[from..from + len]) {
                *dst += g;
            }
        });
    }
}

/// `C = alpha·A·B + beta·C` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn conv3d_forward_gemm(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    out_shape: &[usize],
) -> Tensor {
    let g = ConvGeom::new(input.shape(), k);
    let (n, cout) = (input.shape()[0], out_shape[1]);
    let (plane, rows, lines) = (g.plane(), g.rows(), g.d * g.h);
    let x = input.data();
    let mut out = vec![0.0; n * cout * plane];
    let mut col = Vec::new();
    for b in 0..n {
        let xb = &x[b * g.cin * plane..(b + 1) * g.cin * plane];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        for l0 in (0..lines).step_by(g.lines_per_chunk()) {
            let l1 = (l0 + g.lines_per_chunk()).min(lines);
            let cols = (l1 - l0) * g.w;
            g.im2col(xb, l0, l1, &mut col);
            let dst = &mut ob[l0 * g.w..];
            gemm(
                cout,
                rows,
                cols,
                weight.data(),
                (rows, 1),
                &col,
                (cols, 1),
                0.0,
                dst,
                (plane, 1),
            );
        }
        for (o, chunk) in ob.chunks_mut(plane).enumerate() {
            let bo = bias.data()[o];
            chunk.iter_mut().for_each(|v| *v += bo);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv3d_backward_gemm(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    k: usize,
) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::new(input.shape(), k);
    let (n, cout) = (input.shape()[0], weight.shape()[0]);
    let (plane, rows, lines) = (g.plane(), g.rows(), g.d * g.h);
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    let (mut col, mut gcol) = (Vec::new(), Vec::new());
    for b in 0..n {
        let xb = &x[b * g.cin * plane..(b + 1) * g.cin * plane];
        let gob = &go[b * cout * plane..(b + 1) * cout * plane];
        for (o, chunk) in gob.chunks(plane).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        let gib = &mut gi[b * g.cin * plane..(b + 1) * g.cin * plane];
        for l0 in (0..lines).step_by(g.lines_per_chunk()) {
            let l1 = (l0 + g.lines_per_chunk()).min(lines);
            let cols = (l1 - l0) * g.w;
            g.im2col(xb, l0, l1, &mut col);
            let gsub = &gob[l0 * g.w..];
            // dW += G · colᵀ
            gemm(
                cout,
                cols,
                rows,
                gsub,
                (plane, 1),
                &col,
                (1, cols),
                1.0,
                &mut gw,
                (rows, 1),
            );
            // dcol = Wᵀ · G
            gcol.clear();
            gcol.resize(rows * cols, 0.0);
            gemm(
                rows,
                cout,
                cols,
                wt,
                (1, rows),
                gsub,
                (plane, 1),
                0.0,
                &mut gcol,
                (cols, 1),
            );
            g.col2im(&gcol, l0, l1, gib);
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("conv grad"),
        Tensor::new(weight.shape().to_vec(), gw).expect("conv grad"),
        Tensor::new(vec![cout], gb).expect("conv grad"),
    )
}

/// Output channels from which the unfolded-GEMM kernels are used; below it
/// the padded direct kernels are faster.
const GEMM_MIN_OUT_CHANNELS: usize = 16;

/// Positions per register tile of the direct kernels.
const LANES: usize = 4;

fn round_up(n: usize) -> usize {
    n.div_ceil(LANES) * LANES
}

/// Zero-padded layout of one sample. Output voxel `(z, y, x)` maps to
/// `q = (z·Hp + y)·Wp + x`, and tap `(kd, kh, kw)` reads padded index
/// `q + (kd·Hp + kh)·Wp + kw`.
struct Padded {
    hp: usize,
    wp: usize,
    /// Padded volume size per channel.
    size: usize,
    /// Span of `q` covering every output voxel; the largest tap offset plus
    /// the span equals `size`.
    span: usize,
    taps: Vec<usize>,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let (k, p) = (g.k, g.k / 2);
        let (dp, hp, wp) = (g.d + 2 * p, g.h + 2 * p, g.w + 2 * p);
        let mut taps = Vec::with_capacity(k * k * k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    taps.push((kd * hp + kh) * wp + kw);
                }
            }
        }
        Self {
            hp,
            wp,
            size: dp * hp * wp,
            span: ((g.d - 1) * hp + g.h - 1) * wp + g.w,
            taps,
        }
    }

    fn max_tap(&self) -> usize {
        *self.taps.last().expect("nonempty kernel")
    }

    /// Channel stride of padded inputs, with slack for the last register tile.
    fn stride(&self) -> usize {
        self.size + LANES
    }

    fn interior(&self, g: &ConvGeom, z: usize, y: usize) -> usize {
        let p = g.k / 2;
        ((z + p) * self.hp + y + p) * self.wp + p
    }

    fn pad(&self, g: &ConvGeom, src: &[f64], dst: &mut [f64]) {
        dst.fill(0.0);
        for c in 0..g.cin {
            for z in 0..g.d {
                for y in 0..g.h {
                    let s = ((c * g.d + z) * g.h + y) * g.w;
                    let t = c * self.stride() + self.interior(g, z, y);
                    dst[t..t + g.w].copy_from_slice(&src[s..s + g.w]);
                }
            }
        }
    }

    /// `q`-layout offsets of each output line `(z, y)`.
    fn lines(&self, g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w, hp, wp) = (g.h, g.w, self.hp, self.wp);
        (0..g.d * h).map(move |l| ((l / h * hp + l % h) * wp, l * w))
    }
}

/// Runs `f` compiled for AVX2 when the CPU has it. Results are identical
/// either way since no fused multiply-add is introduced.
#[inline(always)]
fn dispatch<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2")]
        unsafe fn avx2<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        if is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { avx2(f) };
        }
    }
    f()
}

/// `dst[j][q] = init[j] + Σ_s Σ_t wts[(s·T + t)·n_dst + j] · src[s·stride + offsets[t] + q]`
/// for `q < len` rounded up to whole tiles.
#[allow(clippy::too_many_arguments)]
fn shifted_mac(
    src: &[f64],
    stride: usize,
    n_src: usize,
    offsets: &[usize],
    wts: &[f64],
    n_dst: usize,
    init: &[f64],
    len: usize,
    dst: &mut [f64],
    dst_stride: usize,
) {
    dispatch(|| {
        shifted_mac_impl(
            src, stride, n_src, offsets, wts, n_dst, init, len, dst, dst_stride,
        )
    })
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn shifted_mac_impl(
    src: &[f64],
    stride: usize,
    n_src: usize,
    offsets: &[usize],
    wts: &[f64],
    n_dst: usize,
    init: &[f64],
    len: usize,
    dst: &mut [f64],
    dst_stride: usize,
) {
    let mut j0 = 0;
    while j0 < n_dst {
        match n_dst - j0 {
            1 => shifted_mac_block::<1>(
                src, stride, n_src, offsets, wts, n_dst, j0, init, len, dst, dst_stride,
            ),
            2 => shifted_mac_block::<2>(
                src, stride, n_src, offsets, wts, n_dst, j0, init, len, dst, dst_stride,
            ),
            3 => shifted_mac_block::<3>(
                src, stride, n_src, offsets, wts, n_dst, j0, init, len, dst, dst_stride,
            ),
            _ => shifted_mac_block::<4>(
                src, stride, n_src, offsets, wts, n_dst, j0, init, len, dst, dst_stride,
            ),
        }
        j0 += 4;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn shifted_mac_block<const B: usize>(
    src: &[f64],
    stride: usize,
    n_src: usize,
    offsets: &[usize],
    wts: &[f64],
    n_dst: usize,
    j0: usize,
    init: &[f64],
    len: usize,
    dst: &mut [f64],
    dst_stride: usize,
) {
    let n_taps = offsets.len();
    for q0 in (0..len).step_by(LANES) {
        let mut acc = [[0.0f64; LANES]; B];
        for (j, a) in acc.iter_mut().enumerate() {
            *a = [init[j0 + j]; LANES];
        }
        for s in 0..n_src {
            let base = s * stride + q0;
            let ws = &wts[s * n_taps * n_dst..(s + 1) * n_taps * n_dst];
            for (t, &off) in offsets.iter().enumerate() {
                let x: &[f64; LANES] = src[base + off..base + off + LANES]
                    .try_into()
                    .expect("tile");
                let w = &ws[t * n_dst + j0..t * n_dst + j0 + B];
                for j in 0..B {
                    for l in 0..LANES {
                        acc[j][l] += w[j] * x[l];
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            dst[(j0 + j) * dst_stride + q0..][..LANES].copy_from_slice(a);
        }
    }
}

/// `out[j] = Σ_q rows[j][q] · x[q]` over whole tiles.
#[inline(always)]
fn tile_dots<const B: usize>(rows: [&[f64]; B], x: &[f64], len: usize) -> [f64; B] {
    let mut acc = [[0.0f64; LANES]; B];
    for q0 in (0..len).step_by(LANES) {
        let xv: &[f64; LANES] = x[q0..q0 + LANES].try_into().expect("tile");
        for j in 0..B {
            let r: &[f64; LANES] = rows[j][q0..q0 + LANES].try_into().expect("tile");
            for l in 0..LANES {
                acc[j][l] += r[l] * xv[l];
            }
        }
    }
    acc.map(|a| a.iter().sum())
}

/// `gw[o][c][t] += Σ_q gpad[o][halo + q] · xpad[c][taps[t] + q]` over `span`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn weight_grads(
    gpad: &[f64],
    gstride: usize,
    halo: usize,
    span: usize,
    xpad: &[f64],
    xstride: usize,
    taps: &[usize],
    cin: usize,
    cout: usize,
    gw: &mut [f64],
) {
    let k3 = taps.len();
    let rows = |o: usize| &gpad[o * gstride + halo..][..span];
    let mut o0 = 0;
    while o0 < cout {
        for c in 0..cin {
            let xc = &xpad[c * xstride..(c + 1) * xstride];
            for (t, &off) in taps.iter().enumerate() {
                let x = &xc[off..off + span];
                let mut put = |vals: &[f64]| {
                    for (j, v) in vals.iter().enumerate() {
                        gw[((o0 + j) * cin + c) * k3 + t] += v;
                    }
                };
                match cout - o0 {
                    1 => put(&tile_dots([rows(o0)], x, span)),
                    2 => put(&tile_dots([rows(o0), rows(o0 + 1)], x, span)),
                    3 => put(&tile_dots([rows(o0), rows(o0 + 1), rows(o0 + 2)], x, span)),
                    _ => put(&tile_dots(
                        [rows(o0), rows(o0 + 1), rows(o0 + 2), rows(o0 + 3)],
                        x,
                        span,
                    )),
                }
            }
        }
        o0 += 4;
    }
}

fn conv3d_forward_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    out_shape: &[usize],
) -> Tensor {
    let g = ConvGeom::new(input.shape(), k);
    let pd = Padded::new(&g);
    let (n, cout, plane, k3) = (input.shape()[0], out_shape[1], g.plane(), k * k * k);
    // Weights as [c][tap][o].
    let wt = weight.data();
    let mut wts = vec![0.0; wt.len()];
    for o in 0..cout {
        for c in 0..g.cin {
            for t in 0..k3 {
                wts[(c * k3 + t) * cout + o] = wt[(o * g.cin + c) * k3 + t];
            }
        }
    }
    let len = round_up(pd.span);
    let mut out = vec![0.0; n * cout * plane];
    let mut xpad = vec![0.0; g.cin * pd.stride()];
    let mut acc = vec![0.0; cout * len];
    for b in 0..n {
        pd.pad(&g, &input.data()[b * g.cin * plane..], &mut xpad);
        shifted_mac(
            &xpad,
            pd.stride(),
            g.cin,
            &pd.taps,
            &wts,
            cout,
            bias.data(),
            len,
            &mut acc,
            len,
        );
        for o in 0..cout {
            let ob = (b * cout + o) * plane;
            for (q, l) in pd.lines(&g) {
                out[ob + l..ob + l + g.w].copy_from_slice(&acc[o * len + q..o * len + q + g.w]);
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv3d_backward_direct(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    k: usize,
) -> (Tensor, Tensor, Tensor) {
    let g = ConvGeom::new(input.shape(), k);
    let pd = Padded::new(&g);
    let (n, cout, plane, k3) = (input.shape()[0], weight.shape()[0], g.plane(), k * k * k);
    let wt = weight.data();
    let go = grad_out.data();
    let span = round_up(pd.span);
    let size = round_up(pd.size);
    // Output gradient in q-layout after a zero halo of `max_tap`, so the
    // input gradient is a forward pass with flipped taps.
    let halo = pd.max_tap();
    let gstride = halo + size + LANES;
    let flipped: Vec<usize> = pd.taps.iter().map(|t| halo - t).collect();
    // Weights as [o][tap][c] for the input gradient.
    let mut wts = vec![0.0; wt.len()];
    for o in 0..cout {
        for c in 0..g.cin {
            for t in 0..k3 {
                wts[(o * k3 + t) * g.cin + c] = wt[(o * g.cin + c) * k3 + t];
            }
        }
    }
    let zeros = vec![0.0; g.cin];
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    let mut xpad = vec![0.0; g.cin * pd.stride()];
    let mut gpad = vec![0.0; cout * gstride];
    let mut gxpad = vec![0.0; g.cin * size];
    for b in 0..n {
        pd.pad(&g, &input.data()[b * g.cin * plane..], &mut xpad);
        gpad.fill(0.0);
        for (o, gbo) in gb.iter_mut().enumerate() {
            let ob = (b * cout + o) * plane;
            *gbo += go[ob..ob + plane].iter().sum::<f64>();
            for (q, l) in pd.lines(&g) {
                let t = o * gstride + halo + q;
                gpad[t..t + g.w].copy_from_slice(&go[ob + l..ob + l + g.w]);
            }
        }
        dispatch(|| {
            weight_grads(
                &gpad,
                gstride,
                halo,
                span,
                &xpad,
                pd.stride(),
                &pd.taps,
                g.cin,
                cout,
                &mut gw,
            )
        });
        shifted_mac(
            &gpad, gstride, cout, &flipped, &wts, g.cin, &zeros, size, &mut gxpad, size,
        );
        for c in 0..g.cin {
            for z in 0..g.d {
                for y in 0..g.h {
                    let s = c * size + pd.interior(&g, z, y);
                    let t = ((b * g.cin + c) * g.d + z) * g.h * g.w + y * g.w;
                    gi[t..t + g.w].copy_from_slice(&gxpad[s..s + g.w]);
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gi).expect("conv grad"),
        Tensor::new(weight.shape().to_vec(), gw).expect("conv grad"),
        Tensor::new(vec![cout], gb).expect("conv grad"),
    )
}

fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    k: usize,
    out_shape: &[usize],
) -> Tensor {
    if out_shape[1] >= GEMM_MIN_OUT_CHANNELS {
        conv3d_forward_gemm(input, weight, bias, k, out_shape)
    } else {
        conv3d_forward_direct(input, weight, bias, k, out_shape)
    }
}

fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    k: usize,
) -> (Tensor, Tensor, Tensor) {
    if weight.shape()[0] >= GEMM_MIN_OUT_CHANNELS {
        conv3d_backward_gemm(input, weight, grad_out, k)
    } else {
        conv3d_backward_direct(input, weight, grad_out, k)
    }
}

fn maxpool_forward(input: &Tensor, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let s = input.shape();
    let (h, w) = (s[3], s[4]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let x = input.data();
    let planes = s[0] * s[1];
    let in_plane = s[2] * h * w;
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for pl in 0..planes {
        let base = pl * in_plane;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool shape"),
        argmax,
    )
}

fn linear_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    fin: usize,
    fout: usize,
) -> Tensor {
    let n = input.batch();
    let (x, wt, bs) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * fout);
    for i in 0..n {
        let xi = &x[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let wo = &wt[o * fin..(o + 1) * fin];
            out.push(bs[o] + wo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::new(vec![n, fout], out).expect("linear shape")
}

fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    fin: usize,
    fout: usize,
) -> (Tensor, Vec<Tensor>) {
    let n = input.batch();
    let (x, wt, g) = (input.data(), weight.data(), grad_out.data());
    let mut gi = vec![0.0; n * fin];
    let mut gw = vec![0.0; fout * fin];
    let mut gb = vec![0.0; fout];
    for i in 0..n {
        let xi = &x[i * fin..(i + 1) * fin];
        for o in 0..fout {
            let go = g[i * fout + o];
            gb[o] += go;
            let wo = &wt[o * fin..(o + 1) * fin];
            for j in 0..fin {
                gw[o * fin + j] += go * xi[j];
                gi[i * fin + j] += go * wo[j];
            }
        }
    }
    (
        Tensor::new(vec![n, fin], gi).expect("linear grad"),
        vec![
            Tensor::new(vec![fout, fin], gw).expect("linear grad"),
            Tensor::new(vec![fout], gb).expect("linear grad"),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gemm_and_direct_kernels_agree() {
        for (i, &(shape, cout, k)) in [
            ([2usize, 3, 5, 4, 6], 2usize, 3usize),
            ([1, 2, 3, 7, 5], 5, 5),
            ([2, 1, 6, 6, 6], 17, 3),
            ([1, 4, 2, 3, 9], 3, 5),
        ]
        .iter()
        .enumerate()
        {
            let seed = 40 + i as u64;
            let x = random_tensor(&shape, seed);
            let w = random_tensor(&[cout, shape[1], k, k, k], seed + 1);
            let b = random_tensor(&[cout], seed + 2);
            let out_shape = [shape[0], cout, shape[2], shape[3], shape[4]];
            let a = conv3d_forward_gemm(&x, &w, &b, k, &out_shape);
            let d = conv3d_forward_direct(&x, &w, &b, k, &out_shape);
            let close = |p: &Tensor, q: &Tensor| {
                p.data()
                    .iter()
                    .zip(q.data())
                    .all(|(u, v)| (u - v).abs() < 1e-12)
            };
            assert!(close(&a, &d), "forward {shape:?}");
            let g = random_tensor(&out_shape, seed + 3);
            let ga = conv3d_backward_gemm(&x, &w, &g, k);
            let gd = conv3d_backward_direct(&x, &w, &g, k);
            assert!(
                close(&ga.0, &gd.0) && close(&ga.1, &gd.1) && close(&ga.2, &gd.2),
                "backward {shape:?}"
            );
        }
    }

    #[test]
    fn dirac_kernel_is_identity() {
        for k in [3, 5] {
            let mut layer = Layer::init(
                LayerSpec::conv3d(1, 1, k),
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            layer.params[0] = Tensor::zeros(&[1, 1, k, k, k]);
            let c = k / 2;
            layer.params[0].data_mut()[(c * k + c) * k + c] = 1.0;
            let x = random_tensor(&[1, 1, 4, 3, 5], 1);
            let (y, _) = layer.forward(&x, Mode::Eval, 0).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut layer = Layer::init(
            LayerSpec::conv3d(2, 3, 3),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        layer.params[1] = random_tensor(&[3], 9);
        let x = random_tensor(&[2, 2, 3, 4, 3], 3);
        let (y, _) = layer.forward(&x, Mode::Train, 0).unwrap();
        let (d, h, w) = (3usize, 4usize, 3usize);
        let xv = |b: usize, c: usize, z: isize, yy: isize, xx: isize| {
            if z < 0 || yy < 0 || xx < 0 || z >= d as isize || yy >= h as isize || xx >= w as isize
            {
                0.0
            } else {
                x.data()[(((b * 2 + c) * d + z as usize) * h + yy as usize) * w + xx as usize]
            }
        };
        for b in 0..2 {
            for o in 0..3 {
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut s = layer.params[1].data()[o];
                            for c in 0..2 {
                                for kd in 0..3 {
                                    for kh in 0..3 {
                                        for kw in 0..3 {
                                            let wv = layer.params[0].data()
                                                [(((o * 2 + c) * 3 + kd) * 3 + kh) * 3 + kw];
                                            s += wv
                                                * xv(
                                                    b,
                                                    c,
                                                    z as isize + kd as isize - 1,
                                                    yy as isize + kh as isize - 1,
                                                    xx as isize + kw as isize - 1,
                                                );
                                        }
                                    }
                                }
                            }
                            let got = y.data()[(((b * 3 + o) * d + z) * h + yy) * w + xx];
                            assert!((got - s).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_of_one_to_eight_is_eight() {
        let mut layer = Layer::init(LayerSpec::Maxpool3d, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::new(vec![1, 1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
        let (g, _) = layer
            .backward(&cache, &Tensor::full(&[1, 1, 1, 1, 1], 2.0))
            .unwrap();
        assert_eq!(g.data()[7], 2.0);
        assert_eq!(g.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut layer = Layer::init(LayerSpec::Maxpool3d, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let (_, cache) = layer.forward(&x, Mode::Train, 0).unwrap();
        let (g, _) = layer
            .backward(&cache, &Tensor::full(&[1, 1, 1, 1, 1], 1.0))
            .unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert_eq!(g.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn pool_floors_odd_sizes() {
        let s = LayerSpec::Maxpool3d.output_shape(&[2, 3, 5, 7, 4]).unwrap();
        assert_eq!(s, vec![2, 3, 2, 3, 2]);
        assert!(LayerSpec::Maxpool3d.output_shape(&[1, 1, 1, 4, 4]).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_each_channel() {
        let mut layer = Layer::init(LayerSpec::batchnorm3d(3), &mut ChaCha8Rng::seed_from_u64(0));
        let mut x = random_tensor(&[4, 3, 2, 3, 2], 5);
        x.scale(10.0);
        let (y, _) = layer.forward(&x, Mode::Train, 0).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 12..(b * 3 + ch + 1) * 12].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        // running stats moved towards batch stats
        assert!(layer.buffers[1].data().iter().all(|&v| v > 1.0));
    }

    #[test]
    fn batchnorm_eval_is_deterministic() {
        let mut layer = Layer::init(LayerSpec::batchnorm3d(2), &mut ChaCha8Rng::seed_from_u64(0));
        layer.buffers[0] = random_tensor(&[2], 1);
        let x = random_tensor(&[1, 2, 2, 2, 2], 7);
        let (a, _) = layer.forward(&x, Mode::Eval, 1).unwrap();
        let (b, _) = layer.forward(&x, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn relu_backward_passes_positive_gradients() {
        let mut layer = Layer::init(LayerSpec::Relu, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::new(vec![1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let (_, cache) = layer.forward(&x, Mode::Train, 0).unwrap();
        let g = Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        assert_eq!(layer.backward(&cache, &g).unwrap().0, g);
    }

    #[test]
    fn dropout_eval_is_identity_both_ways() {
        let mut layer = Layer::init(
            LayerSpec::Dropout { p: 0.5 },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let x = random_tensor(&[2, 5], 3);
        let (y, cache) = layer.forward(&x, Mode::Eval, 9).unwrap();
        assert_eq!(y, x);
        let g = random_tensor(&[2, 5], 4);
        assert_eq!(layer.backward(&cache, &g).unwrap().0, g);
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let mut layer = Layer::init(
            LayerSpec::Dropout { p: 0.5 },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let x = Tensor::full(&[1, 64], 1.0);
        let a = layer.forward(&x, Mode::Train, 3).unwrap().0;
        let b = layer.forward(&x, Mode::Train, 3).unwrap().0;
        let c = layer.forward(&x, Mode::Train, 4).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn shape_mismatch_reports_expected_and_got() {
        let mut layer = Layer::init(LayerSpec::linear(3, 2), &mut ChaCha8Rng::seed_from_u64(0));
        let err = layer
            .forward(&Tensor::zeros(&[1, 4]), Mode::Eval, 0)
            .unwrap_err();
        match err {
            Error::Shape { expected, got, .. } => {
                assert_eq!(expected, vec![1, 3]);
                assert_eq!(got, vec![1, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let relu = Layer::init(LayerSpec::Relu, &mut ChaCha8Rng::seed_from_u64(0));
        let cache = Cache::Dropout { mask: None };
        assert!(relu.backward(&cache, &Tensor::zeros(&[1, 1])).is_err());
    }
}

//! Normalization, activation, pooling, linear and dropout primitives.
//!
//! Forward/backward pairs with no graph capture. Channel statistics
//! accumulate in f64 over ascending index order, so repeated runs are
//! bit-identical and the accumulators stay accurate over large spatial
//! extents.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Gradients of a normalization layer, shaped like their sources.
#[derive(Debug)]
pub struct NormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> RunningStats {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

fn check_affine(op: &str, channels: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape(format!(
            "{op}: gamma/beta must be [{channels}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Channel mean and biased variance over `n` contiguous values, two-pass.
fn channel_stats(vals: &[f32]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mut sum = 0.0f64;
    for &v in vals {
        sum += f64::from(v);
    }
    let mean = sum / n;
    let mut sq = 0.0f64;
    for &v in vals {
        let d = f64::from(v) - mean;
        sq += d * d;
    }
    (mean, sq / n)
}

/// Normalizes each channel of `input [C, spatial...]` to zero mean and unit
/// variance over its spatial extent, then applies the affine map
/// `gamma * x + beta`.
pub fn instance_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "instance_norm: input must be [C, spatial...], got rank {}",
            input.rank()
        )));
    }
    let c = input.extent(0);
    check_affine("instance_norm", c, gamma, beta)?;
    let sp = input.numel() / c;
    let mut out = Tensor::zeros(input.shape());
    for ch in 0..c {
        let src = &input.data()[ch * sp..(ch + 1) * sp];
        let (mean, var) = channel_stats(src);
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let g = f64::from(gamma.data()[ch]);
        let b = f64::from(beta.data()[ch]);
        for (o, &v) in out.data_mut()[ch * sp..(ch + 1) * sp].iter_mut().zip(src) {
            *o = ((f64::from(v) - mean) * inv * g + b) as f32;
        }
    }
    Ok(out)
}

/// Gradients of [`instance_norm`]; channel statistics are recomputed from
/// the saved input.
pub fn instance_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    eps: f32,
    grad_out: &Tensor,
) -> Result<NormGrads> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape("instance_norm backward: grad_out shape mismatch".to_string()));
    }
    let c = input.extent(0);
    if gamma.shape() != [c] {
        return Err(Error::shape(format!(
            "instance_norm backward: gamma must be [{c}], got {:?}",
            gamma.shape()
        )));
    }
    let sp = input.numel() / c;
    let mut gin = Tensor::zeros(input.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let src = &input.data()[ch * sp..(ch + 1) * sp];
        let g_out = &grad_out.data()[ch * sp..(ch + 1) * sp];
        let (mean, var) = channel_stats(src);
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for (&g, &v) in g_out.iter().zip(src) {
            let xh = (f64::from(v) - mean) * inv;
            sum_g += f64::from(g);
            sum_gx += f64::from(g) * xh;
        }
        ggamma.data_mut()[ch] = sum_gx as f32;
        gbeta.data_mut()[ch] = sum_g as f32;
        let n = sp as f64;
        let scale = f64::from(gamma.data()[ch]) * inv;
        for ((o, &g), &v) in gin.data_mut()[ch * sp..(ch + 1) * sp]
            .iter_mut()
            .zip(g_out)
            .zip(src)
        {
            let xh = (f64::from(v) - mean) * inv;
            *o = (scale * (f64::from(g) - sum_g / n - xh * sum_gx / n)) as f32;
        }
    }
    Ok(NormGrads { input: gin, gamma: ggamma, beta: gbeta })
}

/// Batch normalization over `input [N, C, spatial...]`.
///
/// Training mode normalizes with the current batch statistics (biased
/// variance) and folds them into `running` with weight `momentum`, storing
/// the unbiased variance. Eval mode normalizes with `running` unchanged.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &mut RunningStats,
    eps: f32,
    momentum: f32,
    training: bool,
) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "batch_norm: input must be [N, C, spatial...], got rank {}",
            input.rank()
        )));
    }
    let n = input.extent(0);
    let c = input.extent(1);
    check_affine("batch_norm", c, gamma, beta)?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape(format!(
            "batch_norm: running stats must cover {c} channels, got {}/{}",
            running.mean.len(),
            running.var.len()
        )));
    }
    let sp = input.numel() / (n * c);
    let count = n * sp;
    if training && count < 2 {
        return Err(Error::config(format!(
            "batch_norm: training needs at least 2 values per channel, got {count}"
        )));
    }
    let mut out = Tensor::zeros(input.shape());
    let mut chan = vec![0.0f32; count];
    for ch in 0..c {
        for bi in 0..n {
            let base = (bi * c + ch) * sp;
            chan[bi * sp..(bi + 1) * sp].copy_from_slice(&input.data()[base..base + sp]);
        }
        let (mean, var) = if training {
            channel_stats(&chan)
        } else {
            (f64::from(running.mean[ch]), f64::from(running.var[ch]))
        };
        if training {
            let m = f64::from(momentum);
            let unbiased = var * count as f64 / (count - 1) as f64;
            running.mean[ch] =
                ((1.0 - m) * f64::from(running.mean[ch]) + m * mean) as f32;
            running.var[ch] = ((1.0 - m) * f64::from(running.var[ch]) + m * unbiased) as f32;
        }
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let g = f64::from(gamma.data()[ch]);
        let b = f64::from(beta.data()[ch]);
        for bi in 0..n {
            let base = (bi * c + ch) * sp;
            for (o, &v) in out.data_mut()[base..base + sp]
                .iter_mut()
                .zip(&chan[bi * sp..(bi + 1) * sp])
            {
                *o = ((f64::from(v) - mean) * inv * g + b) as f32;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batch_norm`]. Training mode differentiates through the
/// batch statistics; eval mode treats the running statistics as constants.
pub fn batch_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    running: &RunningStats,
    eps: f32,
    training: bool,
    grad_out: &Tensor,
) -> Result<NormGrads> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape("batch_norm backward: grad_out shape mismatch".to_string()));
    }
    let n = input.extent(0);
    let c = input.extent(1);
    let sp = input.numel() / (n * c);
    let count = n * sp;
    let mut gin = Tensor::zeros(input.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mean, var) = if training {
            let mut chan = vec![0.0f32; count];
            for bi in 0..n {
                let base = (bi * c + ch) * sp;
                chan[bi * sp..(bi + 1) * sp].copy_from_slice(&input.data()[base..base + sp]);
            }
            channel_stats(&chan)
        } else {
            (f64::from(running.mean[ch]), f64::from(running.var[ch]))
        };
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for bi in 0..n {
            let base = (bi * c + ch) * sp;
            for (&g, &v) in grad_out.data()[base..base + sp]
                .iter()
                .zip(&input.data()[base..base + sp])
            {
                let xh = (f64::from(v) - mean) * inv;
                sum_g += f64::from(g);
                sum_gx += f64::from(g) * xh;
            }
        }
        ggamma.data_mut()[ch] = sum_gx as f32;
        gbeta.data_mut()[ch] = sum_g as f32;
        let scale = f64::from(gamma.data()[ch]) * inv;
        for bi in 0..n {
            let base = (bi * c + ch) * sp;
            for i in 0..sp {
                let g = f64::from(grad_out.data()[base + i]);
                let v = f64::from(input.data()[base + i]);
                let xh = (v - mean) * inv;
                gin.data_mut()[base + i] = if training {
                    (scale * (g - sum_g / count as f64 - xh * sum_gx / count as f64)) as f32
                } else {
                    (scale * g) as f32
                };
            }
        }
    }
    Ok(NormGrads { input: gin, gamma: ggamma, beta: gbeta })
}

/// `x >= 0 -> x`, `x < 0 -> slope * x`, elementwise.
pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Gradient of [`leaky_relu`]; the kink at zero takes the positive branch.
pub fn leaky_relu_backward(input: &Tensor, slope: f32, grad_out: &Tensor) -> Tensor {
    assert_eq!(input.shape(), grad_out.shape(), "leaky_relu backward: shape mismatch");
    let mut gin = grad_out.clone();
    for (g, &v) in gin.data_mut().iter_mut().zip(input.data()) {
        if v < 0.0 {
            *g *= slope;
        }
    }
    gin
}

/// `1 / (1 + e^(-x))`, elementwise.
pub fn sigmoid(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        // exp(x) / (1 + exp(x)) avoids overflow for very negative x.
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of [`sigmoid`], expressed through the forward output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(output.shape(), grad_out.shape(), "sigmoid backward: shape mismatch");
    let mut gin = grad_out.clone();
    for (g, &y) in gin.data_mut().iter_mut().zip(output.data()) {
        *g *= y * (1.0 - y);
    }
    gin
}

/// Per-channel mean over all spatial positions of `input [C, spatial...]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "global_avg_pool: input must be [C, spatial...], got rank {}",
            input.rank()
        )));
    }
    let c = input.extent(0);
    let sp = input.numel() / c;
    let mut out = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum = 0.0f64;
        for &v in &input.data()[ch * sp..(ch + 1) * sp] {
            sum += f64::from(v);
        }
        out.data_mut()[ch] = (sum / sp as f64) as f32;
    }
    Ok(out)
}

/// Gradient of [`global_avg_pool`]: spreads each channel gradient evenly.
pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let c = input_shape[0];
    if grad_out.shape() != [c] {
        return Err(Error::shape(format!(
            "global_avg_pool backward: grad_out must be [{c}], got {:?}",
            grad_out.shape()
        )));
    }
    let sp: usize = input_shape[1..].iter().product();
    let mut gin = Tensor::zeros(input_shape);
    for ch in 0..c {
        let g = grad_out.data()[ch] / sp as f32;
        gin.data_mut()[ch * sp..(ch + 1) * sp].fill(g);
    }
    Ok(gin)
}

/// Affine map `weight [F_out, F_in] * input [F_in] + bias`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.rank() != 1 || weight.rank() != 2 {
        return Err(Error::shape("linear: input rank 1, weight rank 2".to_string()));
    }
    let (fo, fi) = (weight.extent(0), weight.extent(1));
    if input.extent(0) != fi {
        return Err(Error::shape(format!(
            "linear: input has {} features, weight expects {fi}",
            input.extent(0)
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [fo] {
            return Err(Error::shape(format!("linear: bias must be [{fo}], got {:?}", b.shape())));
        }
    }
    let mut out = Tensor::zeros(&[fo]);
    for r in 0..fo {
        let mut acc = bias.map_or(0.0, |b| f64::from(b.data()[r]));
        let row = &weight.data()[r * fi..(r + 1) * fi];
        for (&w, &x) in row.iter().zip(input.data()) {
            acc += f64::from(w) * f64::from(x);
        }
        out.data_mut()[r] = acc as f32;
    }
    Ok(out)
}

/// Gradients of [`linear`]: `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (fo, fi) = (weight.extent(0), weight.extent(1));
    if grad_out.shape() != [fo] {
        return Err(Error::shape(format!(
            "linear backward: grad_out must be [{fo}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut gin = Tensor::zeros(&[fi]);
    for j in 0..fi {
        let mut acc = 0.0f64;
        for r in 0..fo {
            acc += f64::from(grad_out.data()[r]) * f64::from(weight.data()[r * fi + j]);
        }
        gin.data_mut()[j] = acc as f32;
    }
    let mut gw = Tensor::zeros(&[fo, fi]);
    for r in 0..fo {
        let g = grad_out.data()[r];
        for j in 0..fi {
            gw.data_mut()[r * fi + j] = g * input.data()[j];
        }
    }
    Ok((gin, gw, grad_out.clone()))
}

/// Fills `data` with Kaiming-normal samples: zero mean, variance
/// 2 / ((1 + slope^2) * fan_in). Consumes the rng in element order.
pub fn kaiming_fill(data: &mut [f32], fan_in: usize, slope: f64, rng: &mut ChaCha8Rng) {
    use rand_distr::Distribution;
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
    for v in data.iter_mut() {
        *v = normal.sample(rng) as f32;
    }
}

/// Elementwise scale factors drawn for one dropout application; reused by
/// the backward pass.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    pub scale: Option<Vec<f32>>,
}

/// Zeroes each element with probability `rate` and scales survivors by
/// `1/(1-rate)` in training mode; identity (and no RNG consumption) in eval
/// mode or at rate 0. Elements draw from `rng` in ascending index order.
pub fn dropout(
    input: &Tensor,
    rate: f32,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout: rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone(), DropoutMask { scale: None }));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut out = input.clone();
    let mut scale = vec![0.0f32; input.numel()];
    for (s, v) in scale.iter_mut().zip(out.data_mut()) {
        if rng.gen::<f32>() < rate {
            *v = 0.0;
        } else {
            *s = keep;
            *v *= keep;
        }
    }
    Ok((out, DropoutMask { scale: Some(scale) }))
}

/// Gradient of [`dropout`] under the mask drawn in the forward pass.
pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    match &mask.scale {
        None => grad_out.clone(),
        Some(scale) => {
            let mut gin = grad_out.clone();
            for (g, &s) in gin.data_mut().iter_mut().zip(scale) {
                *g *= s;
            }
            gin
        }
    }
}

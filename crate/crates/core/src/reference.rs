//! Naive f64 reference implementations and a finite-difference harness.
//!
//! Everything here trades speed for obviousness: direct loops, f64
//! accumulation, no blocking. The optimized kernels are tested against
//! these, and gradient checks difference these forwards. Outputs stay in
//! f64 so that differencing them is not polluted by f32 output rounding,
//! which would otherwise dominate the quotient at small step sizes.

use crate::conv::{conv_out_extent, transpose_out_extent, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An f64 oracle output: shape plus row-major values.
#[derive(Debug, Clone)]
pub struct Volume64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Volume64 {
    pub fn zeros(shape: &[usize]) -> Volume64 {
        let n = shape.iter().product();
        Volume64 { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect())
            .expect("oracle shape is valid")
    }

    /// Dot product against an f32 projection vector, in f64.
    pub fn project(&self, proj: &[f32]) -> f64 {
        assert_eq!(self.data.len(), proj.len(), "projection length mismatch");
        self.data.iter().zip(proj).map(|(&v, &p)| v * f64::from(p)).sum()
    }
}

/// Largest elementwise deviation between an analytic gradient and a numeric
/// one, relative to the larger magnitude. The 1.0 floor makes near-zero
/// gradients compare absolutely.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = f64::from(a);
            (a - n).abs() / a.abs().max(n.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Central finite difference of `loss` with respect to each entry of `x`.
/// The divisor uses the f32-representable perturbation actually applied.
pub fn finite_diff(x: &mut [f32], eps: f32, mut loss: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let keep = x[i];
        let up_x = keep + eps;
        let down_x = keep - eps;
        x[i] = up_x;
        let up = loss(x);
        x[i] = down_x;
        let down = loss(x);
        x[i] = keep;
        grad[i] = (up - down) / (f64::from(up_x) - f64::from(down_x));
    }
    grad
}

/// Central finite differences together with a smoothness certificate per
/// entry. `gap` holds the normalized disagreement between the forward and
/// backward one-sided quotients: at a smooth point it is O(eps), while a
/// derivative jump anywhere inside the stencil shows up in it at full
/// size, including jumps at the point itself where two central estimates
/// of different step sizes both go wrong by the same amount. The central
/// estimate is the mean of the two one-sided ones, so its kink bias is
/// bounded by half the gap.
#[derive(Debug, Clone)]
pub struct SidedDiff {
    pub central: Vec<f64>,
    pub gap: Vec<f64>,
}

/// [`finite_diff`] plus the one-sided certificate described on
/// [`SidedDiff`]. Costs one extra loss evaluation in total.
pub fn finite_diff_sided(
    x: &mut [f32],
    eps: f32,
    mut loss: impl FnMut(&[f32]) -> f64,
) -> SidedDiff {
    let mid = loss(x);
    let mut central = vec![0.0f64; x.len()];
    let mut gap = vec![0.0f64; x.len()];
    for i in 0..x.len() {
        let keep = x[i];
        let up_x = keep + eps;
        let down_x = keep - eps;
        x[i] = up_x;
        let up = loss(x);
        x[i] = down_x;
        let down = loss(x);
        x[i] = keep;
        let ahead = (up - mid) / (f64::from(up_x) - f64::from(keep));
        let behind = (mid - down) / (f64::from(keep) - f64::from(down_x));
        central[i] = (up - down) / (f64::from(up_x) - f64::from(down_x));
        gap[i] = (ahead - behind).abs() / ahead.abs().max(behind.abs()).max(1.0);
    }
    SidedDiff { central, gap }
}

/// Outcome of [`check_grad_filtered`]: how many entries were certified
/// smooth and compared, out of how many total.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub compared: usize,
    pub total: usize,
}

/// Compares an analytic gradient against [`finite_diff_sided`] output.
/// Entries whose certificate gap reaches `tol / 2` sit on a kink where
/// differencing says nothing about the true derivative, so they are
/// skipped; every certified entry must match within `tol`. A miswired
/// backward corrupts certified entries as much as skipped ones, so the
/// filter costs no detection power, but callers should still bound the
/// skipped fraction to keep the check meaningful.
pub fn check_grad_filtered(label: &str, analytic: &[f32], fd: &SidedDiff, tol: f64) -> GradCheck {
    assert_eq!(analytic.len(), fd.central.len(), "gradient length mismatch");
    let mut compared = 0;
    for i in 0..analytic.len() {
        if fd.gap[i] >= tol / 2.0 {
            continue;
        }
        compared += 1;
        let a = f64::from(analytic[i]);
        let n = fd.central[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        assert!(
            err < tol,
            "{label}[{i}]: analytic {} vs fd {n} (rel err {err:.3e}) on a smooth entry",
            analytic[i],
        );
    }
    GradCheck { compared, total: analytic.len() }
}

/// Naive 3D convolution with f64 accumulation.
pub fn conv3d(input: &Tensor, p: &ConvParams) -> Result<Volume64> {
    if input.rank() != 4 || p.weight.rank() != 5 {
        return Err(Error::shape("reference conv3d: input rank 4, weight rank 5".to_string()));
    }
    let (ci, d, h, w) = (input.extent(0), input.extent(1), input.extent(2), input.extent(3));
    if p.weight.extent(1) != ci {
        return Err(Error::shape("reference conv3d: channel mismatch".to_string()));
    }
    let co = p.weight.extent(0);
    let k = [p.weight.extent(2), p.weight.extent(3), p.weight.extent(4)];
    let (s, pa) = (&p.stride, &p.padding);
    let od = conv_out_extent("reference conv3d", 0, d, k[0], s[0], pa[0])?;
    let oh = conv_out_extent("reference conv3d", 1, h, k[1], s[1], pa[1])?;
    let ow = conv_out_extent("reference conv3d", 2, w, k[2], s[2], pa[2])?;
    let idat = input.data();
    let wdat = p.weight.data();
    let mut out = Volume64::zeros(&[co, od, oh, ow]);
    let mut o = 0;
    for c in 0..co {
        let bias = p.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[c]));
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias;
                    for cin in 0..ci {
                        for kz in 0..k[0] {
                            let zin = (z * s[0] + kz) as isize - pa[0] as isize;
                            if zin < 0 || zin >= d as isize {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let yin = (y * s[1] + ky) as isize - pa[1] as isize;
                                if yin < 0 || yin >= h as isize {
                                    continue;
                                }
                                for kx in 0..k[2] {
                                    let xin = (x * s[2] + kx) as isize - pa[2] as isize;
                                    if xin < 0 || xin >= w as isize {
                                        continue;
                                    }
                                    let iv = idat[((cin * d + zin as usize) * h + yin as usize) * w
                                        + xin as usize];
                                    let wv = wdat[(((c * ci + cin) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                                    acc += f64::from(iv) * f64::from(wv);
                                }
                            }
                        }
                    }
                    out.data[o] = acc;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Naive transposed 3D convolution: scatter with f64 accumulation.
pub fn conv_transpose3d(input: &Tensor, p: &ConvParams) -> Result<Volume64> {
    if input.rank() != 4 || p.weight.rank() != 5 {
        return Err(Error::shape(
            "reference conv_transpose3d: input rank 4, weight rank 5".to_string(),
        ));
    }
    let (ci, d, h, w) = (input.extent(0), input.extent(1), input.extent(2), input.extent(3));
    if p.weight.extent(0) != ci {
        return Err(Error::shape("reference conv_transpose3d: channel mismatch".to_string()));
    }
    let co = p.weight.extent(1);
    let k = [p.weight.extent(2), p.weight.extent(3), p.weight.extent(4)];
    let (s, pa) = (&p.stride, &p.padding);
    let od = transpose_out_extent("reference conv_transpose3d", 0, d, k[0], s[0], pa[0])?;
    let oh = transpose_out_extent("reference conv_transpose3d", 1, h, k[1], s[1], pa[1])?;
    let ow = transpose_out_extent("reference conv_transpose3d", 2, w, k[2], s[2], pa[2])?;
    let idat = input.data();
    let wdat = p.weight.data();
    let mut out = Volume64::zeros(&[co, od, oh, ow]);
    for c in 0..co {
        let bias = p.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[c]));
        for v in &mut out.data[c * od * oh * ow..(c + 1) * od * oh * ow] {
            *v = bias;
        }
    }
    for cin in 0..ci {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let iv = f64::from(idat[((cin * d + z) * h + y) * w + x]);
                    for c in 0..co {
                        for kz in 0..k[0] {
                            let zo = (z * s[0] + kz) as isize - pa[0] as isize;
                            if zo < 0 || zo >= od as isize {
                                continue;
                            }
                            for ky in 0..k[1] {
                                let yo = (y * s[1] + ky) as isize - pa[1] as isize;
                                if yo < 0 || yo >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k[2] {
                                    let xo = (x * s[2] + kx) as isize - pa[2] as isize;
                                    if xo < 0 || xo >= ow as isize {
                                        continue;
                                    }
                                    let wv = wdat
                                        [(((cin * co + c) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                                    out.data[((c * od + zo as usize) * oh + yo as usize) * ow
                                        + xo as usize] += iv * f64::from(wv);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Naive batched 2D convolution: each slice convolved independently.
pub fn conv2d_batched(input: &Tensor, p: &ConvParams) -> Result<Volume64> {
    if input.rank() != 4 || p.weight.rank() != 4 {
        return Err(Error::shape(
            "reference conv2d_batched: input and weight rank 4".to_string(),
        ));
    }
    let (n, ci, a, b) = (input.extent(0), input.extent(1), input.extent(2), input.extent(3));
    if p.weight.extent(1) != ci {
        return Err(Error::shape("reference conv2d_batched: channel mismatch".to_string()));
    }
    let co = p.weight.extent(0);
    let k = [p.weight.extent(2), p.weight.extent(3)];
    let (s, pa) = (&p.stride, &p.padding);
    let oa = conv_out_extent("reference conv2d_batched", 0, a, k[0], s[0], pa[0])?;
    let ob = conv_out_extent("reference conv2d_batched", 1, b, k[1], s[1], pa[1])?;
    let idat = input.data();
    let wdat = p.weight.data();
    let mut out = Volume64::zeros(&[n, co, oa, ob]);
    let mut o = 0;
    for slice in 0..n {
        for c in 0..co {
            let bias = p.bias.as_ref().map_or(0.0, |bt| f64::from(bt.data()[c]));
            for y in 0..oa {
                for x in 0..ob {
                    let mut acc = bias;
                    for cin in 0..ci {
                        for ky in 0..k[0] {
                            let yin = (y * s[0] + ky) as isize - pa[0] as isize;
                            if yin < 0 || yin >= a as isize {
                                continue;
                            }
                            for kx in 0..k[1] {
                                let xin = (x * s[1] + kx) as isize - pa[1] as isize;
                                if xin < 0 || xin >= b as isize {
                                    continue;
                                }
                                let iv = idat[((slice * ci + cin) * a + yin as usize) * b
                                    + xin as usize];
                                let wv = wdat[((c * ci + cin) * k[0] + ky) * k[1] + kx];
                                acc += f64::from(iv) * f64::from(wv);
                            }
                        }
                    }
                    out.data[o] = acc;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Naive instance norm: per-channel standardization over spatial axes in
/// f64, then the affine map.
pub fn instance_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Volume64 {
    let c = input.extent(0);
    let sp = input.numel() / c;
    let mut out = Volume64::zeros(input.shape());
    for ch in 0..c {
        let src = &input.data()[ch * sp..(ch + 1) * sp];
        let mean = src.iter().map(|&v| f64::from(v)).sum::<f64>() / sp as f64;
        let var = src.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / sp as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let g = f64::from(gamma.data()[ch]);
        let b = f64::from(beta.data()[ch]);
        for (o, &v) in out.data[ch * sp..(ch + 1) * sp].iter_mut().zip(src) {
            *o = (f64::from(v) - mean) * inv * g + b;
        }
    }
    out
}

/// Naive batch norm forward. Training mode standardizes with batch
/// statistics; eval mode uses the provided running statistics.
pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &crate::ops::RunningStats,
    eps: f32,
    training: bool,
) -> Volume64 {
    let n = input.extent(0);
    let c = input.extent(1);
    let sp = input.numel() / (n * c);
    let count = (n * sp) as f64;
    let mut out = Volume64::zeros(input.shape());
    for ch in 0..c {
        let gather: Vec<f64> = (0..n)
            .flat_map(|bi| {
                let base = (bi * c + ch) * sp;
                input.data()[base..base + sp].iter().map(|&v| f64::from(v))
            })
            .collect();
        let (mean, var) = if training {
            let mean = gather.iter().sum::<f64>() / count;
            let var = gather.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / count;
            (mean, var)
        } else {
            (f64::from(running.mean[ch]), f64::from(running.var[ch]))
        };
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let g = f64::from(gamma.data()[ch]);
        let b = f64::from(beta.data()[ch]);
        for bi in 0..n {
            let base = (bi * c + ch) * sp;
            for i in 0..sp {
                out.data[base + i] = (gather[bi * sp + i] - mean) * inv * g + b;
            }
        }
    }
    out
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Volume64 {
    let mut out = Volume64::zeros(input.shape());
    for (o, &v) in out.data.iter_mut().zip(input.data()) {
        let v = f64::from(v);
        *o = if v < 0.0 { f64::from(slope) * v } else { v };
    }
    out
}

pub fn sigmoid(input: &Tensor) -> Volume64 {
    let mut out = Volume64::zeros(input.shape());
    for (o, &v) in out.data.iter_mut().zip(input.data()) {
        *o = 1.0 / (1.0 + (-f64::from(v)).exp());
    }
    out
}

pub fn global_avg_pool(input: &Tensor) -> Volume64 {
    let c = input.extent(0);
    let sp = input.numel() / c;
    let mut out = Volume64::zeros(&[c]);
    for ch in 0..c {
        out.data[ch] = input.data()[ch * sp..(ch + 1) * sp]
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>()
            / sp as f64;
    }
    out
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Volume64 {
    let (fo, fi) = (weight.extent(0), weight.extent(1));
    let mut out = Volume64::zeros(&[fo]);
    for r in 0..fo {
        let mut acc = bias.map_or(0.0, |b| f64::from(b.data()[r]));
        for j in 0..fi {
            acc += f64::from(weight.data()[r * fi + j]) * f64::from(input.data()[j]);
        }
        out.data[r] = acc;
    }
    out
}

//! Convolution forward/backward kernels.
//!
//! Convolution here means cross-correlation (no kernel flip). Every output
//! element accumulates its taps in ascending `(c_in, kz, ky, kx)` order, so
//! results are bit-identical from run to run. The same slab-blocked
//! im2col + matmul engine backs `conv3d`, `conv2d_batched` (a depth-1
//! kernel over a permuted layout) and `conv_transpose3d` (the adjoint
//! routines with input/output roles swapped).

use crate::error::{Error, Result};
use crate::matmul::{matmul_acc, transpose_into};
use crate::tensor::Tensor;

/// Weight, bias and geometry of one convolution layer.
///
/// `weight` is `[C_out, C_in, k, k]` for 2D and `[C_out, C_in, k, k, k]`
/// for 3D. For `conv_transpose3d` the first two axes read as
/// `[C_in, C_out, ...]` instead (the layout of the adjoint). `stride` and
/// `padding` carry one entry per spatial axis.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: &[usize],
        padding: &[usize],
    ) -> Result<ConvParams> {
        let rank = weight.rank();
        if rank != 4 && rank != 5 {
            return Err(Error::shape(format!(
                "conv params: weight must have rank 4 or 5, got {rank}"
            )));
        }
        let spatial = rank - 2;
        if stride.len() != spatial || padding.len() != spatial {
            return Err(Error::shape(format!(
                "conv params: need {spatial} stride/padding entries, got {}/{}",
                stride.len(),
                padding.len()
            )));
        }
        if let Some(s) = stride.iter().position(|&s| s == 0) {
            return Err(Error::config(format!("conv params: stride is 0 on spatial axis {s}")));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride: stride.to_vec(),
            padding: padding.to_vec(),
        })
    }

    /// Stride-1 parameters with same-size padding `k/2` (odd kernels only).
    pub fn same(weight: Tensor, bias: Option<Tensor>) -> Result<ConvParams> {
        let rank = weight.rank();
        if rank != 4 && rank != 5 {
            return Err(Error::shape(format!(
                "conv params: weight must have rank 4 or 5, got {rank}"
            )));
        }
        let mut padding = Vec::new();
        for ax in 2..rank {
            let k = weight.extent(ax);
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "conv params: same-padding undefined for even kernel extent {k} on axis {}",
                    ax - 2
                )));
            }
            padding.push(k / 2);
        }
        let spatial = rank - 2;
        ConvParams::new(weight, bias, &vec![1; spatial], &padding)
    }
}

/// Gradients returned by the backward passes, shaped like their sources.
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(op: &str, axis: usize, in_e: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::config(format!("{op}: stride is 0 on spatial axis {axis}")));
    }
    let padded = in_e + 2 * p;
    if padded < k {
        return Err(Error::shape(format!(
            "{op}: spatial axis {axis}: input extent {in_e} with padding {p} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn transpose_out_extent(op: &str, axis: usize, in_e: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::config(format!("{op}: stride is 0 on spatial axis {axis}")));
    }
    let grown = (in_e - 1) * s + k;
    if grown <= 2 * p {
        return Err(Error::shape(format!(
            "{op}: spatial axis {axis}: output extent would be non-positive (input {in_e}, kernel {k}, stride {s}, padding {p})"
        )));
    }
    Ok(grown - 2 * p)
}

/// Geometry of one 3D convolution: channel counts, input/output extents,
/// kernel, stride, padding. `transpose_out3d` builds the geometry of the
/// underlying convolution whose adjoint the transpose computes.
#[derive(Debug, Clone, Copy)]
struct Geom {
    ci: usize,
    co: usize,
    ind: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Geom {
    fn ck(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }

    fn out_spatial(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn in_spatial(&self) -> usize {
        self.ind[0] * self.ind[1] * self.ind[2]
    }
}

fn geom_for_conv(op: &str, input: &Tensor, p: &ConvParams) -> Result<Geom> {
    if input.rank() != 4 {
        return Err(Error::shape(format!("{op}: input must be [C, D, H, W], got rank {}", input.rank())));
    }
    if p.weight.rank() != 5 {
        return Err(Error::shape(format!("{op}: weight must have rank 5, got {}", p.weight.rank())));
    }
    if p.stride.len() != 3 || p.padding.len() != 3 {
        return Err(Error::shape(format!(
            "{op}: need 3 stride/padding entries, got {}/{}",
            p.stride.len(),
            p.padding.len()
        )));
    }
    let ci = input.extent(0);
    if p.weight.extent(1) != ci {
        return Err(Error::shape(format!(
            "{op}: input has {ci} channels, weight expects {}",
            p.weight.extent(1)
        )));
    }
    let co = p.weight.extent(0);
    if let Some(b) = &p.bias {
        if b.shape() != [co] {
            return Err(Error::shape(format!(
                "{op}: bias must be [{co}], got {:?}",
                b.shape()
            )));
        }
    }
    let ind = [input.extent(1), input.extent(2), input.extent(3)];
    let k = [p.weight.extent(2), p.weight.extent(3), p.weight.extent(4)];
    let s = [p.stride[0], p.stride[1], p.stride[2]];
    let pa = [p.padding[0], p.padding[1], p.padding[2]];
    let mut out = [0; 3];
    for ax in 0..3 {
        out[ax] = conv_out_extent(op, ax, ind[ax], k[ax], s[ax], pa[ax])?;
    }
    Ok(Geom { ci, co, ind, out, k, s, p: pa })
}

/// Geometry for `conv_transpose3d(input, p)`: the underlying convolution
/// maps the transpose's output space back onto its input space.
fn geom_for_transpose(op: &str, input: &Tensor, p: &ConvParams) -> Result<Geom> {
    if input.rank() != 4 {
        return Err(Error::shape(format!("{op}: input must be [C, D, H, W], got rank {}", input.rank())));
    }
    if p.weight.rank() != 5 {
        return Err(Error::shape(format!("{op}: weight must have rank 5, got {}", p.weight.rank())));
    }
    if p.stride.len() != 3 || p.padding.len() != 3 {
        return Err(Error::shape(format!(
            "{op}: need 3 stride/padding entries, got {}/{}",
            p.stride.len(),
            p.padding.len()
        )));
    }
    let ci_t = input.extent(0);
    if p.weight.extent(0) != ci_t {
        return Err(Error::shape(format!(
            "{op}: input has {ci_t} channels, weight expects {} (transpose weight is [C_in, C_out, ...])",
            p.weight.extent(0)
        )));
    }
    let co_t = p.weight.extent(1);
    if let Some(b) = &p.bias {
        if b.shape() != [co_t] {
            return Err(Error::shape(format!(
                "{op}: bias must be [{co_t}], got {:?}",
                b.shape()
            )));
        }
    }
    let ind_t = [input.extent(1), input.extent(2), input.extent(3)];
    let k = [p.weight.extent(2), p.weight.extent(3), p.weight.extent(4)];
    let s = [p.stride[0], p.stride[1], p.stride[2]];
    let pa = [p.padding[0], p.padding[1], p.padding[2]];
    let mut out_t = [0; 3];
    for ax in 0..3 {
        out_t[ax] = transpose_out_extent(op, ax, ind_t[ax], k[ax], s[ax], pa[ax])?;
    }
    // Conv view: image space = transpose output, result space = transpose input.
    Ok(Geom { ci: co_t, co: ci_t, ind: out_t, out: ind_t, k, s, p: pa })
}

/// Upper bound on the im2col slab, in column positions.
fn slab_positions(ck: usize, ow: usize) -> usize {
    const TARGET_BYTES: usize = 2 << 20;
    let per_pos = ck * 4;
    let rows = (TARGET_BYTES / per_pos.max(1) / ow.max(1)).max(1);
    rows * ow
}

/// Writes `dst[x] = src_row[x + x0]` where the source index is in
/// `[0, w)`, zero elsewhere.
fn fill_clipped_run(dst: &mut [f32], src_row: &[f32], x0: isize, w: usize) {
    let n = dst.len();
    let lo = ((-x0).max(0) as usize).min(n);
    let hi = ((w as isize - x0).clamp(0, n as isize)) as usize;
    dst[..lo].fill(0.0);
    if hi > lo {
        let s0 = (lo as isize + x0) as usize;
        dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
    }
    if hi < n {
        dst[hi.max(lo)..].fill(0.0);
    }
}

/// Gathers the kernel taps for output rows `[row0, row0 + nrows)` into
/// `cols` (`ck x nrows*ow`). An output row is one `(z, y)` pair; taps are
/// laid out in ascending `(c_in, kz, ky, kx)` order.
fn im2col_slab(cols: &mut [f32], input: &[f32], g: &Geom, row0: usize, nrows: usize) {
    let [d, h, w] = g.ind;
    let [k0, k1, k2] = g.k;
    let [s0, s1, s2] = g.s;
    let [p0, p1, p2] = g.p;
    let (oh, ow) = (g.out[1], g.out[2]);
    let ss = nrows * ow;
    let mut r = 0;
    for c in 0..g.ci {
        for kz in 0..k0 {
            for ky in 0..k1 {
                for kx in 0..k2 {
                    let dst_row = &mut cols[r * ss..(r + 1) * ss];
                    for ri in 0..nrows {
                        let row = row0 + ri;
                        let (z, y) = (row / oh, row % oh);
                        let zin = (z * s0 + kz) as isize - p0 as isize;
                        let yin = (y * s1 + ky) as isize - p1 as isize;
                        let dst = &mut dst_row[ri * ow..(ri + 1) * ow];
                        if zin < 0 || zin >= d as isize || yin < 0 || yin >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let base = (c * d + zin as usize) * h * w + yin as usize * w;
                        if s2 == 1 {
                            let x0 = kx as isize - p2 as isize;
                            fill_clipped_run(dst, &input[base..base + w], x0, w);
                        } else {
                            for x in 0..ow {
                                let xin = (x * s2 + kx) as isize - p2 as isize;
                                dst[x] = if xin < 0 || xin >= w as isize {
                                    0.0
                                } else {
                                    input[base + xin as usize]
                                };
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_slab`]: accumulates the tap values back into the
/// input-shaped buffer.
fn col2im_slab_acc(gin: &mut [f32], cols: &[f32], g: &Geom, row0: usize, nrows: usize) {
    let [d, h, w] = g.ind;
    let [k0, k1, k2] = g.k;
    let [s0, s1, s2] = g.s;
    let [p0, p1, p2] = g.p;
    let (oh, ow) = (g.out[1], g.out[2]);
    let ss = nrows * ow;
    let mut r = 0;
    for c in 0..g.ci {
        for kz in 0..k0 {
            for ky in 0..k1 {
                for kx in 0..k2 {
                    let src_row = &cols[r * ss..(r + 1) * ss];
                    for ri in 0..nrows {
                        let row = row0 + ri;
                        let (z, y) = (row / oh, row % oh);
                        let zin = (z * s0 + kz) as isize - p0 as isize;
                        let yin = (y * s1 + ky) as isize - p1 as isize;
                        if zin < 0 || zin >= d as isize || yin < 0 || yin >= h as isize {
                            continue;
                        }
                        let base = (c * d + zin as usize) * h * w + yin as usize * w;
                        let src = &src_row[ri * ow..(ri + 1) * ow];
                        if s2 == 1 {
                            let x0 = kx as isize - p2 as isize;
                            let n = src.len();
                            let lo = ((-x0).max(0) as usize).min(n);
                            let hi = ((w as isize - x0).clamp(0, n as isize)) as usize;
                            if hi > lo {
                                let s0x = (lo as isize + x0) as usize;
                                let gslice = &mut gin[base + s0x..base + s0x + (hi - lo)];
                                for (gv, sv) in gslice.iter_mut().zip(&src[lo..hi]) {
                                    *gv += sv;
                                }
                            }
                        } else {
                            for x in 0..ow {
                                let xin = (x * s2 + kx) as isize - p2 as isize;
                                if xin >= 0 && xin < w as isize {
                                    gin[base + xin as usize] += src[x];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `out = weight * im2col(input) + bias`, slab by slab.
fn fwd_into(out: &mut [f32], input: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &Geom) {
    let ck = g.ck();
    let st = g.out_spatial();
    let ow = g.out[2];
    let total_rows = g.out[0] * g.out[1];
    let slab = slab_positions(ck, ow);
    let slab_rows = slab / ow;
    let mut cols = vec![0.0f32; ck * slab];
    let mut obuf = vec![0.0f32; g.co * slab];
    let mut row0 = 0;
    while row0 < total_rows {
        let nrows = slab_rows.min(total_rows - row0);
        let ss = nrows * ow;
        im2col_slab(&mut cols[..ck * ss], input, g, row0, nrows);
        let ob = &mut obuf[..g.co * ss];
        match bias {
            Some(b) => {
                for (c, chunk) in ob.chunks_exact_mut(ss).enumerate() {
                    chunk.fill(b[c]);
                }
            }
            None => ob.fill(0.0),
        }
        matmul_acc(ob, weight, &cols[..ck * ss], g.co, ck, ss);
        for c in 0..g.co {
            out[c * st + row0 * ow..c * st + row0 * ow + ss]
                .copy_from_slice(&ob[c * ss..(c + 1) * ss]);
        }
        row0 += nrows;
    }
}

/// `gin += col2im(weight^T * grad_out)`, slab by slab. `gin` must be zeroed
/// (or hold a partial sum to extend).
fn grad_input_into(gin: &mut [f32], grad_out: &[f32], weight: &[f32], g: &Geom) {
    let ck = g.ck();
    let st = g.out_spatial();
    let ow = g.out[2];
    let total_rows = g.out[0] * g.out[1];
    let slab = slab_positions(ck, ow);
    let slab_rows = slab / ow;
    let mut wt = vec![0.0f32; ck * g.co];
    transpose_into(&mut wt, weight, g.co, ck);
    let mut gbuf = vec![0.0f32; g.co * slab];
    let mut gcols = vec![0.0f32; ck * slab];
    let mut row0 = 0;
    while row0 < total_rows {
        let nrows = slab_rows.min(total_rows - row0);
        let ss = nrows * ow;
        for c in 0..g.co {
            gbuf[c * ss..(c + 1) * ss]
                .copy_from_slice(&grad_out[c * st + row0 * ow..c * st + row0 * ow + ss]);
        }
        let gc = &mut gcols[..ck * ss];
        gc.fill(0.0);
        matmul_acc(gc, &wt, &gbuf[..g.co * ss], ck, g.co, ss);
        col2im_slab_acc(gin, gc, g, row0, nrows);
        row0 += nrows;
    }
}

/// `gw += grad_out * im2col(input)^T`, accumulating slabs in ascending
/// output-position order.
fn grad_weight_into(gw: &mut [f32], input: &[f32], grad_out: &[f32], g: &Geom) {
    let ck = g.ck();
    let st = g.out_spatial();
    let ow = g.out[2];
    let total_rows = g.out[0] * g.out[1];
    let slab = slab_positions(ck, ow);
    let slab_rows = slab / ow;
    let mut cols = vec![0.0f32; ck * slab];
    let mut colst = vec![0.0f32; ck * slab];
    let mut gbuf = vec![0.0f32; g.co * slab];
    let mut row0 = 0;
    while row0 < total_rows {
        let nrows = slab_rows.min(total_rows - row0);
        let ss = nrows * ow;
        im2col_slab(&mut cols[..ck * ss], input, g, row0, nrows);
        transpose_into(&mut colst[..ck * ss], &cols[..ck * ss], ck, ss);
        for c in 0..g.co {
            gbuf[c * ss..(c + 1) * ss]
                .copy_from_slice(&grad_out[c * st + row0 * ow..c * st + row0 * ow + ss]);
        }
        matmul_acc(gw, &gbuf[..g.co * ss], &colst[..ck * ss], g.co, ss, ck);
        row0 += nrows;
    }
}

/// Per-channel sums of `grad_out`, in ascending position order.
fn bias_grad(grad_out: &[f32], co: usize, spatial: usize) -> Vec<f32> {
    let mut gb = vec![0.0f32; co];
    for c in 0..co {
        let mut acc = 0.0f32;
        for &v in &grad_out[c * spatial..(c + 1) * spatial] {
            acc += v;
        }
        gb[c] = acc;
    }
    gb
}

/// 3D convolution of `input [C_in, D, H, W]` producing
/// `[C_out, D', H', W']` with `d' = (d + 2p - k)/s + 1` per axis.
pub fn conv3d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = geom_for_conv("conv3d", input, p)?;
    let mut out = Tensor::zeros(&[g.co, g.out[0], g.out[1], g.out[2]]);
    fwd_into(
        out.data_mut(),
        input.data(),
        p.weight.data(),
        p.bias.as_ref().map(|b| b.data()),
        &g,
    );
    Ok(out)
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub fn conv3d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = geom_for_conv("conv3d", input, p)?;
    let want = [g.co, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != want {
        return Err(Error::shape(format!(
            "conv3d backward: grad_out must be {want:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let mut gin = Tensor::zeros(input.shape());
    grad_input_into(gin.data_mut(), grad_out.data(), p.weight.data(), &g);
    let mut gw = Tensor::zeros(p.weight.shape());
    grad_weight_into(gw.data_mut(), input.data(), grad_out.data(), &g);
    let gb = p.bias.as_ref().map(|_| {
        Tensor::new(&[g.co], bias_grad(grad_out.data(), g.co, g.out_spatial())).unwrap()
    });
    Ok(ConvGrads { input: gin, weight: gw, bias: gb })
}

/// Transposed 3D convolution (adjoint of [`conv3d`] in its linear part).
///
/// `input` is `[C_in, D, H, W]` with `C_in = weight.shape[0]`; the output
/// has `weight.shape[1]` channels and extent `(d - 1)*s + k - 2p` per axis.
pub fn conv_transpose3d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = geom_for_transpose("conv_transpose3d", input, p)?;
    // g.ind is the transpose's output space; g.out its input space.
    let mut out = Tensor::zeros(&[g.ci, g.ind[0], g.ind[1], g.ind[2]]);
    grad_input_into(out.data_mut(), input.data(), p.weight.data(), &g);
    if let Some(b) = &p.bias {
        let sp = g.in_spatial();
        for (c, chunk) in out.data_mut().chunks_exact_mut(sp).enumerate() {
            let bv = b.data()[c];
            for v in chunk {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose3d`].
pub fn conv_transpose3d_backward(
    input: &Tensor,
    p: &ConvParams,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let g = geom_for_transpose("conv_transpose3d", input, p)?;
    let want = [g.ci, g.ind[0], g.ind[1], g.ind[2]];
    if grad_out.shape() != want {
        return Err(Error::shape(format!(
            "conv_transpose3d backward: grad_out must be {want:?}, got {:?}",
            grad_out.shape()
        )));
    }
    // d(input): the underlying convolution applied to grad_out.
    let mut ginp = Tensor::zeros(input.shape());
    fwd_into(ginp.data_mut(), grad_out.data(), p.weight.data(), None, &g);
    // d(weight): conv weight-grad with image = grad_out, response = input.
    let mut gw = Tensor::zeros(p.weight.shape());
    grad_weight_into(gw.data_mut(), grad_out.data(), input.data(), &g);
    let gb = p.bias.as_ref().map(|_| {
        Tensor::new(&[g.ci], bias_grad(grad_out.data(), g.ci, g.in_spatial())).unwrap()
    });
    Ok(ConvGrads { input: ginp, weight: gw, bias: gb })
}

/// Permutes a rank-4 tensor's axes: `out[i] = in[index at perm positions]`,
/// i.e. `perm` lists for each output axis the source axis it takes.
pub fn permute4(t: &Tensor, perm: [usize; 4]) -> Tensor {
    assert_eq!(t.rank(), 4, "permute4 needs rank 4");
    let src_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&a| src_shape[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let mut src_strides = [0usize; 4];
    let mut acc = 1;
    for ax in (0..4).rev() {
        src_strides[ax] = acc;
        acc *= src_shape[ax];
    }
    let os = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let stp = [
        src_strides[perm[0]],
        src_strides[perm[1]],
        src_strides[perm[2]],
        src_strides[perm[3]],
    ];
    let src = t.data();
    let dst = out.data_mut();
    let mut o = 0;
    for i0 in 0..os[0] {
        for i1 in 0..os[1] {
            for i2 in 0..os[2] {
                let base = i0 * stp[0] + i1 * stp[1] + i2 * stp[2];
                if stp[3] == 1 {
                    dst[o..o + os[3]].copy_from_slice(&src[base..base + os[3]]);
                    o += os[3];
                } else {
                    for i3 in 0..os[3] {
                        dst[o] = src[base + i3 * stp[3]];
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

fn params_2d_as_3d(op: &str, p: &ConvParams) -> Result<ConvParams> {
    if p.weight.rank() != 4 {
        return Err(Error::shape(format!(
            "{op}: weight must be [C_out, C_in, k, k], got rank {}",
            p.weight.rank()
        )));
    }
    if p.stride.len() != 2 || p.padding.len() != 2 {
        return Err(Error::shape(format!(
            "{op}: need 2 stride/padding entries, got {}/{}",
            p.stride.len(),
            p.padding.len()
        )));
    }
    let w = p.weight.clone();
    let (co, ci, ka, kb) = (w.extent(0), w.extent(1), w.extent(2), w.extent(3));
    Ok(ConvParams {
        weight: w.reshaped(&[co, ci, 1, ka, kb])?,
        bias: p.bias.clone(),
        stride: vec![1, p.stride[0], p.stride[1]],
        padding: vec![0, p.padding[0], p.padding[1]],
    })
}

/// 2D convolution over a batch of slices: `input [N, C_in, A, B]` to
/// `[N, C_out, A', B']`. Equivalent to running the same 2D kernel on every
/// slice independently.
pub fn conv2d_batched(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d_batched: input must be [N, C, A, B], got rank {}",
            input.rank()
        )));
    }
    let p3 = params_2d_as_3d("conv2d_batched", p)?;
    // [N, C, A, B] -> [C, N, A, B]: the batch axis becomes a depth axis
    // covered by a kernel extent of 1.
    let view = permute4(input, [1, 0, 2, 3]);
    let out = conv3d(&view, &p3).map_err(rename_op("conv3d", "conv2d_batched"))?;
    Ok(permute4(&out, [1, 0, 2, 3]))
}

/// Gradients of [`conv2d_batched`].
pub fn conv2d_batched_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    if input.rank() != 4 || grad_out.rank() != 4 {
        return Err(Error::shape(
            "conv2d_batched backward: input and grad_out must be rank 4".to_string(),
        ));
    }
    let p3 = params_2d_as_3d("conv2d_batched", p)?;
    let view = permute4(input, [1, 0, 2, 3]);
    let gview = permute4(grad_out, [1, 0, 2, 3]);
    let grads = conv3d_backward(&view, &p3, &gview).map_err(rename_op("conv3d", "conv2d_batched"))?;
    let wshape = p.weight.shape().to_vec();
    Ok(ConvGrads {
        input: permute4(&grads.input, [1, 0, 2, 3]),
        weight: grads.weight.reshaped(&wshape)?,
        bias: grads.bias,
    })
}

fn rename_op(from: &'static str, to: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape(m) => Error::Shape(m.replace(from, to)),
        Error::Config(m) => Error::Config(m.replace(from, to)),
        other => other,
    }
}

//! Tri-planar convolution: one 2D kernel bank applied along the three
//! anatomical planes of a volume.
//!
//! The output channels split into axial, coronal and sagittal groups. Each
//! group convolves its plane family 2D-slice-wise, with the remaining axis
//! acting as the batch: axial works on (H, W) planes across D, coronal on
//! (D, W) across H, sagittal on (D, H) across W. Groups concatenate in
//! axial, coronal, sagittal order. Because the kernel bank stays strictly
//! 2D, pretrained 2D weights load into it verbatim.
//!
//! Each view runs as a depth-1-kernel 3D convolution over an axis-permuted
//! layout, which reuses the conv engine and its summation-order contract.

use crate::conv::{self, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A tri-planar kernel bank: 2D weights plus the channel split and the
/// in-plane stride/padding.
#[derive(Debug, Clone)]
pub struct ACSKernel {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub split: (usize, usize, usize),
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

/// Partition of `c_out` channels into (axial, coronal, sagittal) groups:
/// as even as possible, remainder assigned axial first, then coronal.
pub fn split_channels(c_out: usize) -> (usize, usize, usize) {
    let n_a = c_out.div_ceil(3);
    let rem = c_out - n_a;
    let n_c = rem.div_ceil(2);
    (n_a, n_c, rem - n_c)
}

impl ACSKernel {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<ACSKernel> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "acs kernel: weight must be [C_out, C_in, k, k], got rank {}",
                weight.rank()
            )));
        }
        let k = weight.extent(2);
        if weight.extent(3) != k {
            return Err(Error::shape(format!(
                "acs kernel: kernel must be square, got {k}x{}",
                weight.extent(3)
            )));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "acs kernel: kernel extent {k} is even; same-padding is undefined"
            )));
        }
        if padding != [k / 2, k / 2] {
            return Err(Error::config(format!(
                "acs kernel: padding must be {} (same-padding for k={k}), got {padding:?}",
                k / 2
            )));
        }
        if stride[0] == 0 || stride[0] != stride[1] {
            return Err(Error::config(format!(
                "acs kernel: stride must be equal and positive on both plane axes, got {stride:?} \
                 (unequal strides give the three views incompatible extents)"
            )));
        }
        let c_out = weight.extent(0);
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(format!(
                    "acs kernel: bias must be [{c_out}], got {:?}",
                    b.shape()
                )));
            }
        }
        Ok(ACSKernel {
            bias,
            split: split_channels(c_out),
            stride,
            padding,
            weight,
        })
    }

    /// Stride-1 kernel with same-padding derived from the weight shape.
    pub fn same(weight: Tensor, bias: Option<Tensor>) -> Result<ACSKernel> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "acs kernel: weight must be [C_out, C_in, k, k], got rank {}",
                weight.rank()
            )));
        }
        let k = weight.extent(2);
        ACSKernel::new(weight, bias, [1, 1], [k / 2, k / 2])
    }

    pub fn c_out(&self) -> usize {
        self.weight.extent(0)
    }

    pub fn c_in(&self) -> usize {
        self.weight.extent(1)
    }

    pub fn k(&self) -> usize {
        self.weight.extent(2)
    }
}

/// Parameter count of a tri-planar kernel: `c_out * c_in * k^2`, plus
/// `c_out` when biased. Exactly 1/k of the matching 3D kernel's count.
pub fn acs_param_count(c_in: usize, c_out: usize, k: usize, bias: bool) -> usize {
    c_out * c_in * k * k + if bias { c_out } else { 0 }
}

/// How each channel group maps onto a permuted volume: `view` carries the
/// input axes into (C, batch, plane0, plane1) order and `back` restores
/// (C, D, H, W) from the group's output.
const VIEWS: [([usize; 4], [usize; 4]); 3] = [
    ([0, 1, 2, 3], [0, 1, 2, 3]), // axial: batch D, planes (H, W)
    ([0, 2, 1, 3], [0, 2, 1, 3]), // coronal: batch H, planes (D, W)
    ([0, 3, 1, 2], [0, 2, 3, 1]), // sagittal: batch W, planes (D, H)
];

fn group_ranges(split: (usize, usize, usize)) -> [(usize, usize); 3] {
    let (n_a, n_c, n_s) = split;
    [(0, n_a), (n_a, n_a + n_c), (n_a + n_c, n_a + n_c + n_s)]
}

/// The group's kernel rows as a depth-1 3D convolution parameter set.
fn group_params(kernel: &ACSKernel, lo: usize, hi: usize) -> ConvParams {
    let (ci, k) = (kernel.c_in(), kernel.k());
    let rows = hi - lo;
    let per_row = ci * k * k;
    let weight = Tensor::new(
        &[rows, ci, 1, k, k],
        kernel.weight.data()[lo * per_row..hi * per_row].to_vec(),
    )
    .expect("group slice preserves element count");
    let bias = kernel.bias.as_ref().map(|b| {
        Tensor::new(&[rows], b.data()[lo..hi].to_vec()).expect("bias slice")
    });
    let s = kernel.stride[0];
    ConvParams {
        weight,
        bias,
        stride: vec![s, s, s],
        padding: vec![0, kernel.padding[0], kernel.padding[1]],
    }
}

fn out_extent(e: usize, s: usize) -> usize {
    (e - 1) / s + 1
}

fn check_input(op: &str, input: &Tensor, kernel: &ACSKernel) -> Result<()> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "{op}: input must be [C, D, H, W], got rank {}",
            input.rank()
        )));
    }
    if input.extent(0) != kernel.c_in() {
        return Err(Error::shape(format!(
            "{op}: input has {} channels, kernel expects {}",
            input.extent(0),
            kernel.c_in()
        )));
    }
    Ok(())
}

/// Tri-planar convolution of `input [C_in, D, H, W]`. With stride 1 the
/// output keeps the spatial extents; stride s subsamples every axis to
/// `floor((e-1)/s) + 1` (same-padding in the planes, position subsampling
/// along each view's batch axis).
pub fn acs_forward(input: &Tensor, kernel: &ACSKernel) -> Result<Tensor> {
    check_input("acs_forward", input, kernel)?;
    let s = kernel.stride[0];
    let (d, h, w) = (input.extent(1), input.extent(2), input.extent(3));
    let (od, oh, ow) = (out_extent(d, s), out_extent(h, s), out_extent(w, s));
    let mut out = Tensor::zeros(&[kernel.c_out(), od, oh, ow]);
    let sp = od * oh * ow;
    for (g, (lo, hi)) in group_ranges(kernel.split).into_iter().enumerate() {
        if hi == lo {
            continue;
        }
        let (view, back) = VIEWS[g];
        let p = group_params(kernel, lo, hi);
        let viewed = conv::permute4(input, view);
        let group_out = conv::conv3d(&viewed, &p)?;
        let restored = conv::permute4(&group_out, back);
        out.data_mut()[lo * sp..hi * sp].copy_from_slice(restored.data());
    }
    Ok(out)
}

/// Gradients of [`acs_forward`]. Channel groups are independent, so each
/// view's adjoint lands in its own slice of the weight and bias gradients
/// and the input gradients from the three views accumulate.
pub fn acs_backward(
    input: &Tensor,
    kernel: &ACSKernel,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    check_input("acs_backward", input, kernel)?;
    let s = kernel.stride[0];
    let (d, h, w) = (input.extent(1), input.extent(2), input.extent(3));
    let want = [kernel.c_out(), out_extent(d, s), out_extent(h, s), out_extent(w, s)];
    if grad_out.shape() != want {
        return Err(Error::shape(format!(
            "acs_backward: grad_out must be {want:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let sp: usize = want[1..].iter().product();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(kernel.weight.shape());
    let mut grad_bias = kernel.bias.as_ref().map(|_| Tensor::zeros(&[kernel.c_out()]));
    let (ci, k) = (kernel.c_in(), kernel.k());
    let per_row = ci * k * k;
    for (g, (lo, hi)) in group_ranges(kernel.split).into_iter().enumerate() {
        if hi == lo {
            continue;
        }
        let (view, back) = VIEWS[g];
        let p = group_params(kernel, lo, hi);
        let viewed = conv::permute4(input, view);
        // grad_out group arrives in output layout; carry it into the view's
        // layout by inverting the back-permutation (view == inverse(back)
        // composed with the axis roles, see VIEWS).
        let mut gslice = Tensor::new(
            &[hi - lo, want[1], want[2], want[3]],
            grad_out.data()[lo * sp..hi * sp].to_vec(),
        )?;
        gslice = conv::permute4(&gslice, invert4(back));
        let grads = conv::conv3d_backward(&viewed, &p, &gslice)?;
        let gin = conv::permute4(&grads.input, invert4(view));
        for (a, b) in grad_input.data_mut().iter_mut().zip(gin.data()) {
            *a += b;
        }
        grad_weight.data_mut()[lo * per_row..hi * per_row]
            .copy_from_slice(grads.weight.data());
        if let (Some(gb), Some(gbs)) = (grad_bias.as_mut(), grads.bias) {
            gb.data_mut()[lo..hi].copy_from_slice(gbs.data());
        }
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// Inverse of a 4-axis permutation.
fn invert4(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0usize; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn split_examples_and_invariants() {
        assert_eq!(split_channels(6), (2, 2, 2));
        assert_eq!(split_channels(7), (3, 2, 2));
        assert_eq!(split_channels(1), (1, 0, 0));
        for c in 1..=1000 {
            let (a, b, s) = split_channels(c);
            assert_eq!(a + b + s, c);
            assert!(a >= b && b >= s);
            assert!(a - b <= 1 && b - s <= 1);
        }
    }

    #[test]
    fn identity_kernel_is_identity_on_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[1, 3, 4, 5]);
        let kernel = ACSKernel::same(Tensor::filled(&[1, 1, 1, 1], 1.0), None).unwrap();
        let out = acs_forward(&input, &kernel).unwrap();
        assert!(out.bits_eq(&input));
    }

    /// The batched-2D oracle for one view group, computed through the
    /// public 2D conv on explicitly assembled slices.
    fn view_oracle(input: &Tensor, kernel: &ACSKernel, group: usize) -> Tensor {
        let [(a_lo, a_hi), (c_lo, c_hi), (s_lo, s_hi)] = group_ranges(kernel.split);
        let (lo, hi) = [(a_lo, a_hi), (c_lo, c_hi), (s_lo, s_hi)][group];
        let (ci, k) = (kernel.c_in(), kernel.k());
        let per_row = ci * k * k;
        let w2 = Tensor::new(
            &[hi - lo, ci, k, k],
            kernel.weight.data()[lo * per_row..hi * per_row].to_vec(),
        )
        .unwrap();
        let bias = kernel
            .bias
            .as_ref()
            .map(|b| Tensor::new(&[hi - lo], b.data()[lo..hi].to_vec()).unwrap());
        let p = ConvParams {
            weight: w2,
            bias,
            stride: kernel.stride.to_vec(),
            padding: kernel.padding.to_vec(),
        };
        // Assemble [batch, C, plane0, plane1] for the group's view.
        let to_batched: [[usize; 4]; 3] = [[1, 0, 2, 3], [2, 0, 1, 3], [3, 0, 1, 2]];
        let batched = conv::permute4(input, to_batched[group]);
        let out = conv::conv2d_batched(&batched, &p).unwrap();
        // Back to [group_ch, D, H, W].
        let from_batched: [[usize; 4]; 3] = [[1, 0, 2, 3], [1, 2, 0, 3], [1, 2, 3, 0]];
        conv::permute4(&out, from_batched[group])
    }

    #[test]
    fn groups_match_batched_2d_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[2, 4, 5, 6]);
        let kernel = ACSKernel::same(
            rand_tensor(&mut rng, &[7, 2, 3, 3]),
            Some(rand_tensor(&mut rng, &[7])),
        )
        .unwrap();
        let out = acs_forward(&input, &kernel).unwrap();
        assert_eq!(out.shape(), &[7, 4, 5, 6]);
        let sp = 4 * 5 * 6;
        for (g, (lo, hi)) in group_ranges(kernel.split).into_iter().enumerate() {
            let oracle = view_oracle(&input, &kernel, g);
            let got = &out.data()[lo * sp..hi * sp];
            let mut max = 0.0f32;
            for (a, b) in got.iter().zip(oracle.data()) {
                max = max.max((a - b).abs());
            }
            assert!(max < 1e-6, "group {g}: max abs diff {max}");
        }
    }

    #[test]
    fn single_slice_volume_reduces_to_2d_conv() {
        // With D = 1 the axial group sees exactly one (H, W) plane.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, &[2, 1, 6, 6]);
        let kernel = ACSKernel::same(rand_tensor(&mut rng, &[3, 2, 3, 3]), None).unwrap();
        assert_eq!(kernel.split, (1, 1, 1));
        let out = acs_forward(&input, &kernel).unwrap();

        let p = ConvParams::same(
            Tensor::new(&[1, 2, 3, 3], kernel.weight.data()[..18].to_vec()).unwrap(),
            None,
        )
        .unwrap();
        let slice = Tensor::new(&[1, 2, 6, 6], input.data().to_vec()).unwrap();
        let ref2d = conv::conv2d_batched(&slice, &p).unwrap();
        for (a, b) in out.data()[..36].iter().zip(ref2d.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn param_count_arithmetic() {
        assert_eq!(acs_param_count(2, 6, 3, false), 108);
        assert_eq!(acs_param_count(1, 1, 1, true), 2);
        assert_eq!(acs_param_count(64, 64, 3, false), 36_864);
        assert_eq!(36_864 * 3, 110_592);
        for (ci, co, k) in [(1, 1, 1), (4, 32, 3), (64, 64, 3), (320, 320, 5)] {
            let acs = acs_param_count(ci, co, k, false);
            let full3d = co * ci * k * k * k;
            assert_eq!(full3d, acs * k, "ratio must be exactly 1/k");
        }
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kernel = ACSKernel::same(rand_tensor(&mut rng, &[5, 2, 3, 3]), None).unwrap();
        let x = rand_tensor(&mut rng, &[2, 3, 4, 3]);
        let ax = {
            let mut t = x.clone();
            for v in t.data_mut() {
                *v *= 2.5;
            }
            t
        };
        let fx = acs_forward(&x, &kernel).unwrap();
        let fax = acs_forward(&ax, &kernel).unwrap();
        for (a, b) in fax.data().iter().zip(fx.data()) {
            assert!((a - 2.5 * b).abs() < 1e-5);
        }
    }

    #[test]
    fn stride_two_subsamples_every_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&mut rng, &[2, 7, 8, 9]);
        let kernel = ACSKernel::new(
            rand_tensor(&mut rng, &[6, 2, 3, 3]),
            None,
            [2, 2],
            [1, 1],
        )
        .unwrap();
        let out = acs_forward(&input, &kernel).unwrap();
        assert_eq!(out.shape(), &[6, 4, 4, 5]);
    }

    #[test]
    fn even_kernel_and_unequal_stride_are_rejected() {
        let w = Tensor::filled(&[2, 1, 2, 2], 1.0);
        assert!(ACSKernel::new(w, None, [1, 1], [1, 1]).is_err());
        let w = Tensor::filled(&[2, 1, 3, 3], 1.0);
        assert!(ACSKernel::new(w, None, [1, 2], [1, 1]).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let kernel = ACSKernel::same(
            rand_tensor(&mut rng, &[4, 2, 3, 3]),
            Some(rand_tensor(&mut rng, &[4])),
        )
        .unwrap();
        let gz = Tensor::zeros(&[4, 3, 3, 3]);
        let (gi, gw, gb) = acs_backward(&input, &kernel, &gz).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_group_backward_equals_batched_2d_backward() {
        // C_out = 1 puts everything in the axial group.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let kernel = ACSKernel::same(
            rand_tensor(&mut rng, &[1, 2, 3, 3]),
            Some(rand_tensor(&mut rng, &[1])),
        )
        .unwrap();
        let grad_out = rand_tensor(&mut rng, &[1, 3, 4, 4]);
        let (gi, gw, gb) = acs_backward(&input, &kernel, &grad_out).unwrap();

        let p = ConvParams::same(
            Tensor::new(&[1, 2, 3, 3], kernel.weight.data().to_vec()).unwrap(),
            kernel.bias.clone(),
        )
        .unwrap();
        let batched_in = conv::permute4(&input, [1, 0, 2, 3]);
        let batched_go = conv::permute4(&grad_out, [1, 0, 2, 3]);
        let ref_grads = conv::conv2d_batched_backward(&batched_in, &p, &batched_go).unwrap();
        let ref_gi = conv::permute4(&ref_grads.input, [1, 0, 2, 3]);
        assert!(gi.max_abs_diff(&ref_gi) < 1e-6);
        assert!(gw.max_abs_diff(&ref_grads.weight) < 1e-6);
        assert!(gb.unwrap().max_abs_diff(ref_grads.bias.as_ref().unwrap()) < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::reference;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = rand_tensor(&mut rng, &[2, 3, 4, 3]);
        let kernel = ACSKernel::same(
            rand_tensor(&mut rng, &[5, 2, 3, 3]),
            Some(rand_tensor(&mut rng, &[5])),
        )
        .unwrap();
        let out = acs_forward(&input, &kernel).unwrap();
        let proj: Vec<f32> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_out = Tensor::new(out.shape(), proj.clone()).unwrap();
        let (gi, gw, gb) = acs_backward(&input, &kernel, &grad_out).unwrap();

        // f64 forward: the view oracle recomputed in wide precision.
        let f64_forward = |inp: &Tensor, kern: &ACSKernel| -> Vec<f64> {
            let sp = inp.extent(1) * inp.extent(2) * inp.extent(3);
            let mut all = vec![0.0f64; kern.c_out() * sp];
            let to_batched: [[usize; 4]; 3] = [[1, 0, 2, 3], [2, 0, 1, 3], [3, 0, 1, 2]];
            let from_batched: [[usize; 4]; 3] = [[1, 0, 2, 3], [1, 2, 0, 3], [1, 2, 3, 0]];
            for (g, (lo, hi)) in group_ranges(kern.split).into_iter().enumerate() {
                if hi == lo {
                    continue;
                }
                let (ci, k) = (kern.c_in(), kern.k());
                let per_row = ci * k * k;
                let p = ConvParams {
                    weight: Tensor::new(
                        &[hi - lo, ci, k, k],
                        kern.weight.data()[lo * per_row..hi * per_row].to_vec(),
                    )
                    .unwrap(),
                    bias: kern
                        .bias
                        .as_ref()
                        .map(|b| Tensor::new(&[hi - lo], b.data()[lo..hi].to_vec()).unwrap()),
                    stride: kern.stride.to_vec(),
                    padding: kern.padding.to_vec(),
                };
                let batched = conv::permute4(inp, to_batched[g]);
                let o64 = reference::conv2d_batched(&batched, &p).unwrap();
                // Permute the f64 data back through a tensor of indices.
                let idx = Tensor::new(
                    &o64.shape,
                    (0..o64.data.len()).map(|i| i as f32).collect(),
                )
                .unwrap();
                let back = conv::permute4(&idx, from_batched[g]);
                for (pos, &src) in back.data().iter().enumerate() {
                    all[lo * sp + pos] = o64.data[src as usize];
                }
            }
            all
        };

        let proj_loss = |vals: &[f64]| -> f64 {
            vals.iter().zip(&proj).map(|(&v, &p)| v * f64::from(p)).sum()
        };

        let mut x = input.data().to_vec();
        let fd_in = reference::finite_diff(&mut x, 1e-4, |xs| {
            let t = Tensor::new(input.shape(), xs.to_vec()).unwrap();
            proj_loss(&f64_forward(&t, &kernel))
        });
        assert!(reference::max_rel_err(gi.data(), &fd_in) < 1e-4);

        let wshape = kernel.weight.shape().to_vec();
        let mut wdat = kernel.weight.data().to_vec();
        let fd_w = reference::finite_diff(&mut wdat, 1e-4, |ws| {
            let mut kk = kernel.clone();
            kk.weight = Tensor::new(&wshape, ws.to_vec()).unwrap();
            proj_loss(&f64_forward(&input, &kk))
        });
        assert!(reference::max_rel_err(gw.data(), &fd_w) < 1e-4);

        let mut bdat = kernel.bias.as_ref().unwrap().data().to_vec();
        let fd_b = reference::finite_diff(&mut bdat, 1e-4, |bs| {
            let mut kk = kernel.clone();
            kk.bias = Some(Tensor::new(&[5], bs.to_vec()).unwrap());
            proj_loss(&f64_forward(&input, &kk))
        });
        assert!(reference::max_rel_err(gb.unwrap().data(), &fd_b) < 1e-4);
    }
}
